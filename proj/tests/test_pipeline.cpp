#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "kfs/pipeline.hpp"
#include "test_util.hpp"

using namespace kfs;
using namespace kfs::test;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("kfs_pipe_" + std::to_string(mix64(reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

CondenseConfig small_cfg(std::uint64_t seed) {
  CondenseConfig cfg;
  cfg.images_per_class = 1;
  cfg.codes_per_class = 2;
  cfg.num_decoders = 2;
  cfg.decoder = DecoderKind::kLowR;
  cfg.steps = 25;
  cfg.base_seed = seed;
  cfg.feature_width = 8;
  cfg.feature_depth = 3;
  cfg.pretrain_steps = 40;
  cfg.pretrain_batch = 32;
  cfg.threads = 2;
  return cfg;
}

bool models_bit_equal(const CondensedContainer& a, const CondensedContainer& b) {
  if (!bit_equal(a.codebook.codes, b.codebook.codes)) return false;
  for (std::size_t d = 0; d < a.bank.decoders.size(); ++d)
    for (std::size_t l = 0; l < a.bank.decoders[d].w.size(); ++l) {
      if (!bit_equal(a.bank.decoders[d].w[l], b.bank.decoders[d].w[l])) return false;
      if (!bit_equal(a.bank.decoders[d].b[l], b.bank.decoders[d].b[l])) return false;
    }
  return true;
}

}  // namespace

TEST_CASE("adam moves parameters toward a quadratic minimum") {
  Tensor<float> p = Tensor<float>::from({2}, {3.f, -2.f});
  Adam adam({{&p, 0.1f}});
  for (int i = 0; i < 400; ++i) {
    Tensor<float> g = p;  // gradient of 0.5||p||^2
    adam.step({&g});
  }
  CHECK(std::abs(p[0]) < 1e-2f);
  CHECK(std::abs(p[1]) < 1e-2f);
}

TEST_CASE("pretraining improves reconstruction on a held-out probe") {
  Dataset train = make_demo_digits(60, 31);
  DecoderSpec spec = decoder_spec_for(DecoderKind::kLowR, 1, 16, 16);
  PretrainResult res = pretrain_decoder(train, spec, {150, 32, 0.01f, 5});
  CHECK(res.final_mse < res.initial_mse);

  // steps = 0 keeps the random initializations
  PretrainResult raw = pretrain_decoder(train, spec, {0, 32, 0.01f, 5});
  CHECK(raw.final_mse == raw.initial_mse);
  Decoder<float> fresh = build_decoder<float>(spec, mix64(5ull ^ fnv1a64("pretrain/decoder")));
  for (std::size_t l = 0; l < fresh.w.size(); ++l) CHECK(bit_equal(raw.decoder.w[l], fresh.w[l]));
}

TEST_CASE("condense trains, logs, and is bit-deterministic") {
  TempDir tmp;
  Dataset train = make_demo_digits(24, 77);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");
  CondenseConfig cfg = small_cfg(1234);

  CondenseResult a = condense(train, stats, cfg, &cache);
  REQUIRE(static_cast<int>(a.log.size()) == cfg.steps);
  CHECK(a.log.front().loss > a.log.back().loss);  // training reduces the matching loss
  for (const LogRow& r : a.log) CHECK(std::isfinite(r.loss));

  // identical config + seeds: bit-identical model and losses (cache warm now)
  CondenseResult b = condense(train, stats, cfg, &cache);
  CHECK(models_bit_equal(a.model, b.model));
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);

  // deleting the cache reproduces the identical trajectory
  std::filesystem::remove_all(tmp.path / "cache");
  EmbeddingMeanCache cache2(tmp.path / "cache");
  CondenseResult c = condense(train, stats, cfg, &cache2);
  CHECK(models_bit_equal(a.model, c.model));
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == c.log[i].loss);

  // thread count is an execution detail, not part of the math
  CondenseConfig cfg1 = cfg;
  cfg1.threads = 1;
  CondenseResult d = condense(train, stats, cfg1, &cache2);
  CHECK(models_bit_equal(a.model, d.model));
}

TEST_CASE("condense degenerate and chunked modes") {
  TempDir tmp;
  Dataset train = make_demo_digits(16, 78);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");

  // M = 1, D = 1 single-image-per-class condensation still runs
  CondenseConfig cfg = small_cfg(9);
  cfg.codes_per_class = 1;
  cfg.num_decoders = 1;
  cfg.steps = 8;
  cfg.pretrain_steps = 20;
  CondenseResult one = condense(train, stats, cfg, &cache);
  CHECK(one.model.codebook.codes.dim(0) == 2);
  CHECK(one.model.codebook.codes.dim(1) == 1);

  // chunked gradients follow the same trajectory as the whole-graph path
  CondenseConfig whole = small_cfg(10);
  whole.steps = 6;
  whole.pretrain_steps = 20;
  CondenseConfig chunked = whole;
  chunked.chunk_size = 3;  // does not divide C*M*D = 8 evenly on purpose
  CondenseResult w = condense(train, stats, whole, &cache);
  CondenseResult ch = condense(train, stats, chunked, &cache);
  for (std::size_t i = 0; i < w.log.size(); ++i)
    CHECK(std::abs(w.log[i].loss - ch.log[i].loss) / w.log[i].loss < 1e-4f);
  CHECK(rel_l2_err<float>(ch.model.codebook.codes.vec(), w.model.codebook.codes.vec(), 1e-12f) <
        1e-3f);
}

TEST_CASE("biased-pair mode runs and stays finite") {
  TempDir tmp;
  Dataset train = make_demo_digits(16, 79);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");
  CondenseConfig cfg = small_cfg(11);
  cfg.grad_mode = GradMode::kBiasedPair;
  cfg.steps = 10;
  cfg.pretrain_steps = 20;
  CondenseResult res = condense(train, stats, cfg, &cache);
  CHECK(static_cast<int>(res.log.size()) == 10);
}

TEST_CASE("decoder symmetry: exact copy is preserved forever, jitter breaks it") {
  TempDir tmp;
  Dataset train = make_demo_digits(16, 80);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");

  CondenseConfig cfg = small_cfg(12);
  cfg.steps = 6;
  cfg.pretrain_steps = 20;
  cfg.decoder_jitter = 0.f;
  CondenseResult tied = condense(train, stats, cfg, &cache);
  for (std::size_t l = 0; l < tied.model.bank.decoders[0].w.size(); ++l)
    CHECK(bit_equal(tied.model.bank.decoders[0].w[l], tied.model.bank.decoders[1].w[l]));

  cfg.decoder_jitter = 1e-3f;
  CondenseResult split = condense(train, stats, cfg, &cache);
  bool differ = false;
  for (std::size_t l = 0; l < split.model.bank.decoders[0].w.size(); ++l)
    differ = differ || !bit_equal(split.model.bank.decoders[0].w[l], split.model.bank.decoders[1].w[l]);
  CHECK(differ);
}

TEST_CASE("checkpoint restore resumes to a bit-identical trajectory") {
  TempDir tmp;
  Dataset train = make_demo_digits(16, 81);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");

  CondenseConfig cfg = small_cfg(13);
  cfg.steps = 12;
  cfg.pretrain_steps = 20;
  CondenseResult straight = condense(train, stats, cfg, &cache);

  CondenseConfig ckpt = cfg;
  ckpt.checkpoint_prefix = tmp.path / "ck";
  ckpt.checkpoint_every = 6;
  (void)condense(train, stats, ckpt, &cache);
  CondenseCheckpoint mid = load_checkpoint((tmp.path / "ck").string() + "_step6");
  CHECK(mid.step == 6);

  CondenseResult resumed = condense(train, stats, cfg, &cache, &mid);
  REQUIRE(resumed.log.size() == 6);
  CHECK(models_bit_equal(straight.model, resumed.model));
  for (std::size_t i = 0; i < resumed.log.size(); ++i)
    CHECK(resumed.log[i].loss == straight.log[i + 6].loss);
}

TEST_CASE("random coreset selection") {
  Dataset ds = make_demo_digits(10, 42);
  SyntheticDataset<float> a = random_coreset(ds, 3, 5);
  CHECK(a.images.dim(0) == 6);
  CHECK(a.labels == std::vector<int>{0, 0, 0, 1, 1, 1});
  SyntheticDataset<float> b = random_coreset(ds, 3, 5);
  CHECK(bit_equal(a.images, b.images));  // same seed, same selection

  // every selected image is a member of the source set
  const std::int64_t numel = ds.image_numel();
  for (int i = 0; i < 6; ++i) {
    bool found = false;
    for (int j = 0; j < ds.size() && !found; ++j)
      found = (a.images.vec().segment(i * numel, numel) -
               ds.raw_images().vec().segment(j * numel, numel))
                  .norm() == 0.f;
    CHECK(found);
  }
  CHECK_THROWS_WITH_AS(random_coreset(ds, 11, 1), doctest::Contains("only"), Error);
}

TEST_CASE("evaluate trains a classifier and audits data access") {
  Dataset train = make_demo_digits(40, 90);
  Dataset test = make_demo_digits(40, 91);
  ChannelStats<float> stats = train.compute_stats();

  SyntheticDataset<float> core = random_coreset(train, 8, 3);
  EvalConfig cfg;
  cfg.epochs = 30;
  cfg.decay_epochs = {20, 25};
  cfg.width = 8;
  cfg.runs = 2;
  cfg.seed = 5;

  train.reset_access_count();
  EvalResult res = evaluate(core.images, core.labels, 2, stats, test, cfg);
  CHECK(train.access_count() == 0);  // evaluation never reads real training images
  CHECK(res.per_run.size() == 2);
  CHECK(res.mean > 0.55);  // well above chance on the demo task

  // control: the full real training set does at least as well as a coreset
  SyntheticDataset<float> full = as_eval_set(train);
  EvalResult full_res = evaluate(full.images, full.labels, 2, stats, test, cfg);
  CHECK(full_res.mean >= res.mean - 0.05);

  CHECK_THROWS_WITH_AS(evaluate(Tensor<float>({0, 1, 16, 16}), {}, 2, stats, test, cfg),
                       doctest::Contains("empty"), Error);
  EvalConfig bad = cfg;
  bad.decay_epochs = {40};
  CHECK_THROWS_AS(evaluate(core.images, core.labels, 2, stats, test, bad), Error);
}

TEST_CASE("condensed accuracy does not collapse at long training budgets") {
  TempDir tmp;
  Dataset train = make_demo_digits(40, 94);
  Dataset test = make_demo_digits(60, 95);
  ChannelStats<float> stats = train.compute_stats();
  EmbeddingMeanCache cache(tmp.path / "cache");
  CondenseConfig cfg = small_cfg(21);
  cfg.codes_per_class = 3;
  cfg.steps = 60;
  cfg.pretrain_steps = 60;
  cfg.feature_width = 16;
  CondenseResult res = condense(train, stats, cfg, &cache);
  SyntheticDataset<float> synth = synthesize_all(res.model.codebook, res.model.bank);

  EvalConfig ecfg;
  ecfg.width = 16;
  ecfg.runs = 2;
  ecfg.seed = 8;
  std::vector<BudgetSweepRow> rows =
      evaluate_budget_sweep(synth.images, synth.labels, 2, stats, test, ecfg, {40, 400});
  REQUIRE(rows.size() == 2);
  // soft trend: longer training must not collapse the accuracy
  CHECK(rows[1].mean >= rows[0].mean - 0.05);
}

TEST_CASE("budget sweep returns one row per budget") {
  Dataset train = make_demo_digits(20, 92);
  Dataset test = make_demo_digits(20, 93);
  ChannelStats<float> stats = train.compute_stats();
  SyntheticDataset<float> core = random_coreset(train, 4, 3);
  EvalConfig cfg;
  cfg.width = 8;
  cfg.runs = 1;
  cfg.seed = 6;
  std::vector<BudgetSweepRow> rows =
      evaluate_budget_sweep(core.images, core.labels, 2, stats, test, cfg, {5, 20, 60});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].steps == 5);
  CHECK(rows[2].steps == 60);
  for (const auto& r : rows) {
    CHECK(r.mean >= 0.0);
    CHECK(r.mean <= 1.0);
  }
}

TEST_CASE("training log csv format") {
  TempDir tmp;
  std::vector<LogRow> log = {{0, 0.5f, 12.0}, {1, 0.25f, 11.5}};
  const auto p = tmp.path / "log.csv";
  write_log_csv(p, log);
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,loss,wall_ms");
  std::getline(f, line);
  CHECK(line.substr(0, 6) == "0,0.5,");
}
