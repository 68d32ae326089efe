// kfs: dataset condensation via factorized latent codes and shared decoders.
//
// Subcommands: condense, eval, diagnose, gradcheck, cache-means,
// export-images, make-demo-data. All outputs are machine readable (CSV, PPM,
// or the KFS1/KFSM binary formats); errors are a single line on stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "kfs/cache.hpp"
#include "kfs/data.hpp"
#include "kfs/diagnostics.hpp"
#include "kfs/gradcheck.hpp"
#include "kfs/image_io.hpp"
#include "kfs/pipeline.hpp"

using json = nlohmann::json;
using namespace kfs;

namespace {

json load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config " + path.string());
  json j = json::parse(f, nullptr, true, true);  // allow comments
  if (j.value("schema_version", 0) != 1)
    throw Error("config " + path.string() + " must declare \"schema_version\": 1");
  return j;
}

DatasetFormat parse_format(const std::string& s) {
  if (s == "idx") return DatasetFormat::kIdx;
  if (s == "cifar10") return DatasetFormat::kCifar10;
  if (s == "raw-f32") return DatasetFormat::kRawF32;
  throw Error("unknown dataset format \"" + s + "\" (expected idx | cifar10 | raw-f32)");
}

DatasetSource source_from(const json& jd, const char* path_key) {
  DatasetSource src;
  src.format = parse_format(jd.value("format", "raw-f32"));
  for (const auto& p : jd.at(path_key)) src.paths.emplace_back(p.get<std::string>());
  if (jd.contains("normalization")) {
    ChannelStats<float> st;
    for (const auto& v : jd["normalization"].at("mean")) st.mean.push_back(v.get<float>());
    for (const auto& v : jd["normalization"].at("std")) st.stdev.push_back(v.get<float>());
    src.normalization = std::move(st);
  }
  return src;
}

std::filesystem::path cache_dir(const json& cfg) {
  if (const char* env = std::getenv("KFS_CACHE_DIR")) return env;
  return cfg.value("cache_dir", std::string("kfs_cache"));
}

DecoderKind parse_kind(const std::string& s) {
  if (s == "low") return DecoderKind::kLowR;
  if (s == "high") return DecoderKind::kHighR;
  throw Error("unknown decoder kind \"" + s + "\" (expected low | high)");
}

CondenseConfig condense_from(const json& jc) {
  CondenseConfig cfg;
  cfg.images_per_class = jc.value("images_per_class", cfg.images_per_class);
  cfg.codes_per_class = jc.value("codes_per_class", cfg.codes_per_class);
  cfg.num_decoders = jc.value("decoders", cfg.num_decoders);
  cfg.decoder = parse_kind(jc.value("decoder_kind", std::string("low")));
  cfg.steps = jc.value("steps", cfg.steps);
  cfg.lr_decoders = jc.value("lr_decoders", cfg.lr_decoders);
  cfg.lr_codes = jc.value("lr_codes", cfg.lr_codes);
  cfg.base_seed = jc.value("base_seed", cfg.base_seed);
  cfg.chunk_size = jc.value("chunk_size", cfg.chunk_size);
  cfg.feature_width = jc.value("feature_width", cfg.feature_width);
  cfg.feature_depth = jc.value("feature_depth", cfg.feature_depth);
  const std::string mode = jc.value("grad_mode", std::string("full"));
  if (mode == "full")
    cfg.grad_mode = GradMode::kFullBatch;
  else if (mode == "biased-pair")
    cfg.grad_mode = GradMode::kBiasedPair;
  else
    throw Error("unknown grad_mode \"" + mode + "\" (expected full | biased-pair)");
  cfg.pretrain_steps = jc.value("pretrain_steps", cfg.pretrain_steps);
  cfg.pretrain_batch = jc.value("pretrain_batch", cfg.pretrain_batch);
  cfg.pretrain_lr = jc.value("pretrain_lr", cfg.pretrain_lr);
  cfg.code_init_sigma = jc.value("code_init_sigma", cfg.code_init_sigma);
  cfg.decoder_jitter = jc.value("decoder_jitter", cfg.decoder_jitter);
  cfg.threads = jc.value("threads", cfg.threads);
  cfg.checkpoint_every = jc.value("checkpoint_every", cfg.checkpoint_every);
  if (jc.contains("checkpoint_prefix"))
    cfg.checkpoint_prefix = jc["checkpoint_prefix"].get<std::string>();
  return cfg;
}

EvalConfig eval_from(const json& j) {
  EvalConfig cfg;
  if (!j.contains("eval")) return cfg;
  const json& je = j["eval"];
  cfg.epochs = je.value("epochs", cfg.epochs);
  cfg.batch = je.value("batch", cfg.batch);
  cfg.lr = je.value("lr", cfg.lr);
  cfg.momentum = je.value("momentum", cfg.momentum);
  cfg.weight_decay = je.value("weight_decay", cfg.weight_decay);
  cfg.decay_factor = je.value("decay_factor", cfg.decay_factor);
  if (je.contains("decay_epochs")) cfg.decay_epochs = je["decay_epochs"].get<std::vector<int>>();
  cfg.width = je.value("width", cfg.width);
  cfg.depth = je.value("depth", cfg.depth);
  cfg.runs = je.value("runs", cfg.runs);
  cfg.seed = je.value("seed", cfg.seed);
  return cfg;
}

struct DiagnoseToy {
  std::vector<Tensor<double>> real_by_class;
  Tensor<double> real_means;
  LatentCodebook<double> cb;
  DecoderBank<double> bank;
  FeatureNet<double> g;
  ChannelStats<double> stats;
};

DiagnoseToy toy_from(const json& j) {
  json jd = j.value("diagnose", json::object());
  const int C = jd.value("classes", 2);
  const int N = jd.value("examples_per_class", 4);
  const int M = jd.value("codes_per_class", 3);
  const int D = jd.value("decoders", 2);
  const int ch = jd.value("image_channels", 3);
  const int hw = jd.value("image_size", 8);
  const int width = jd.value("feature_width", 16);
  const std::uint64_t seed = jd.value("seed", 0);

  DiagnoseToy toy;
  const DecoderSpec spec = decoder_spec_for(parse_kind(jd.value("decoder_kind", std::string("low"))),
                                            ch, hw, hw);
  toy.cb = make_codebook<double>(C, M, spec);
  toy.cb.codes = Tensor<double>::gaussian(toy.cb.codes.shape(), CounterRng(seed, "diag/codes"), 0.5);
  toy.bank = make_decoder_bank<double>(spec, D, mix64(seed ^ fnv1a64("diag/bank")));
  FeatureNetConfig gcfg;
  gcfg.in_channels = ch;
  gcfg.in_h = gcfg.in_w = hw;
  gcfg.width = width;
  gcfg.depth = 3;
  gcfg.init_seed = mix64(seed ^ fnv1a64("diag/g"));
  toy.g = build_feature_net<double>(gcfg);
  toy.stats = ChannelStats<double>::identity(ch);
  for (int c = 0; c < C; ++c) {
    Tensor<double> batch({N, ch, hw, hw});
    CounterRng rng(mix64(seed ^ fnv1a64("diag/real")), "c" + std::to_string(c));
    for (std::int64_t i = 0; i < batch.size(); ++i)
      batch[i] = rng.uniform(static_cast<std::uint64_t>(i));
    toy.real_by_class.push_back(std::move(batch));
  }
  toy.real_means = class_means_from_batches(toy.real_by_class, toy.g, toy.stats);
  return toy;
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
  if (path.empty()) return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw Error("cannot write output " + path);
  return file;
}

// per-parameter-block comparison rows for the diagnose CSV
void write_block_rows(std::ostream& out, const ModelGrads<double>& closed,
                      const Eigen::VectorXd& exhaustive_flat) {
  const Eigen::VectorXd closed_flat = closed.flatten();
  auto row = [&](const std::string& term, std::int64_t at, std::int64_t len) {
    const double c = closed_flat.segment(at, len).norm();
    const double e = exhaustive_flat.segment(at, len).norm();
    const double abs_err = (closed_flat.segment(at, len) - exhaustive_flat.segment(at, len)).norm();
    const double rel = abs_err / std::max({c, e, 1e-300});
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.12g,%.12g,%.12g,%.12g\n", term.c_str(), c, e, abs_err, rel);
    out << buf;
  };
  std::int64_t at = 0;
  row("codes", at, closed.codes.size());
  at += closed.codes.size();
  for (std::size_t d = 0; d < closed.dec_w.size(); ++d)
    for (std::size_t l = 0; l < closed.dec_w[d].size(); ++l) {
      row("decoder" + std::to_string(d) + "/w" + std::to_string(l), at, closed.dec_w[d][l].size());
      at += closed.dec_w[d][l].size();
      row("decoder" + std::to_string(d) + "/b" + std::to_string(l), at, closed.dec_b[d][l].size());
      at += closed.dec_b[d][l].size();
    }
  row("total", 0, closed_flat.size());
}

int cmd_condense(const std::string& config_path) {
  json cfg = load_config(config_path);
  DatasetSource src = source_from(cfg.at("dataset"), "paths");
  Dataset train = src.load();
  ChannelStats<float> stats = src.stats_for(train);
  CondenseConfig ccfg = condense_from(cfg.at("condense"));
  const std::string out = cfg["condense"].value("out", std::string("condensed.kfs1"));
  const std::string log = cfg["condense"].value("log", std::string("condense_log.csv"));
  if (ccfg.checkpoint_prefix.empty() && ccfg.checkpoint_every > 0)
    ccfg.checkpoint_prefix = out + ".ck";
  EmbeddingMeanCache cache(cache_dir(cfg));
  CondenseResult res = condense(train, stats, ccfg, &cache);
  save_kfs1(out, res.model);
  write_log_csv(log, res.log);
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& condensed,
             const std::vector<int>& budget_steps, const std::string& out_path) {
  json cfg = load_config(config_path);
  DatasetSource test_src = source_from(cfg.at("dataset"), "test_paths");
  Dataset test = test_src.load();
  CondensedContainer model = load_kfs1(condensed);
  SyntheticDataset<float> synth = synthesize_all(model.codebook, model.bank);
  EvalConfig ecfg = eval_from(cfg);

  std::ofstream file;
  std::ostream& out = open_out(file, out_path);
  char buf[256];
  if (budget_steps.empty()) {
    EvalResult r = evaluate(synth.images, synth.labels, test.num_classes(), model.stats, test, ecfg);
    out << "steps,mean_accuracy,std_accuracy";
    for (std::size_t i = 0; i < r.per_run.size(); ++i) out << ",run" << i;
    out << "\n";
    const int n = synth.images.dim(0);
    const int batch = std::max(1, std::min(ecfg.batch, n));
    const int total = ecfg.epochs * ((n + batch - 1) / batch);
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f", total, r.mean, r.stdev);
    out << buf;
    for (double a : r.per_run) {
      std::snprintf(buf, sizeof(buf), ",%.6f", a);
      out << buf;
    }
    out << "\n";
  } else {
    std::vector<BudgetSweepRow> rows = evaluate_budget_sweep(synth.images, synth.labels,
                                                             test.num_classes(), model.stats, test,
                                                             ecfg, budget_steps);
    out << "steps,mean_accuracy,std_accuracy";
    for (std::size_t i = 0; i < rows.front().per_run.size(); ++i) out << ",run" << i;
    out << "\n";
    for (const BudgetSweepRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f", r.steps, r.mean, r.stdev);
      out << buf;
      for (double a : r.per_run) {
        std::snprintf(buf, sizeof(buf), ",%.6f", a);
        out << buf;
      }
      out << "\n";
    }
  }
  return 0;
}

int cmd_diagnose(const std::string& what, const std::string& config_path,
                 const std::string& out_path) {
  json cfg = config_path.empty() ? json{{"schema_version", 1}} : load_config(config_path);
  std::ofstream file;
  std::ostream& out = open_out(file, out_path);

  if (what == "budget") {
    out << "setting,computed_pct,reference_pct,abs_diff_pp,consistent\n";
    char buf[160];
    for (const BudgetReferenceRow& r : budget_reference_report()) {
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.2f,%.4f,%d\n", r.setting.c_str(), r.computed_pct,
                    r.reference_pct, std::abs(r.computed_pct - r.reference_pct),
                    r.consistent ? 1 : 0);
      out << buf;
    }
    return 0;
  }

  DiagnoseToy toy = toy_from(cfg);
  out << "term,closed_form,exhaustive,abs_err,rel_err\n";
  if (what == "bias") {
    auto [lf, full] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
    (void)lf;
    ModelGrads<double> mean_hat =
        exhaustive_pair_mean_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
    Eigen::VectorXd oracle = mean_hat.flatten() - full.flatten();
    ModelGrads<double> closed = bias_closed_form(toy.cb, toy.bank, toy.g, toy.stats);
    write_block_rows(out, closed, oracle);
  } else if (what == "variance") {
    const std::int64_t P = ModelGrads<double>::zeros_like(toy.cb, toy.bank).flat_size();
    const bool full_matrix = P <= 5000;
    ExhaustiveVariance<double> ex = exhaustive_real_index_variance(toy.real_by_class, toy.cb,
                                                                   toy.bank, toy.g, toy.stats,
                                                                   full_matrix);
    VarianceResult<double> closed = variance_closed_form(toy.real_by_class, toy.cb, toy.bank, toy.g,
                                                         toy.stats, full_matrix);
    char buf[200];
    const double tr_err = std::abs(closed.trace - ex.trace);
    std::snprintf(buf, sizeof(buf), "trace,%.12g,%.12g,%.12g,%.12g\n", closed.trace, ex.trace,
                  tr_err, tr_err / std::max(std::abs(ex.trace), 1e-300));
    out << buf;
    if (full_matrix) {
      const double cn = closed.cov->norm(), en = ex.cov->norm();
      const double abs_err = (*closed.cov - *ex.cov).norm();
      std::snprintf(buf, sizeof(buf), "cov_frobenius,%.12g,%.12g,%.12g,%.12g\n", cn, en, abs_err,
                    abs_err / std::max({cn, en, 1e-300}));
      out << buf;
    }
  } else {
    throw Error("diagnose: expected bias | variance | budget, got \"" + what + "\"");
  }
  return 0;
}

int cmd_gradcheck(const std::string& out_path) {
  std::ofstream file;
  std::ostream& out = open_out(file, out_path);
  out << "primitive,max_rel_err,pass\n";
  bool all = true;
  char buf[160];
  for (const GradCheckRow& r : run_gradcheck()) {
    all = all && r.pass;
    std::snprintf(buf, sizeof(buf), "%s,%.3g,%d\n", r.name.c_str(), r.max_rel_err, r.pass ? 1 : 0);
    out << buf;
  }
  return all ? 0 : 2;
}

int cmd_cache_means(const std::string& config_path, const std::string& seed_range) {
  json cfg = load_config(config_path);
  DatasetSource src = source_from(cfg.at("dataset"), "paths");
  Dataset train = src.load();
  ChannelStats<float> stats = src.stats_for(train);
  CondenseConfig ccfg = condense_from(cfg.value("condense", json::object()));

  const auto dots = seed_range.find("..");
  if (dots == std::string::npos) throw Error("--seeds expects a range like 0..100");
  const std::uint64_t a = std::stoull(seed_range.substr(0, dots));
  const std::uint64_t b = std::stoull(seed_range.substr(dots + 2));
  if (b < a) throw Error("--seeds range is empty");

  FeatureNetConfig gbase;
  gbase.in_channels = train.channels();
  gbase.in_h = train.height();
  gbase.in_w = train.width();
  gbase.width = ccfg.feature_width;
  gbase.depth = ccfg.feature_depth;

  EmbeddingMeanCache cache(cache_dir(cfg));
  for (std::uint64_t s = a; s <= b; ++s)
    compute_or_load_means(train, gbase, stats, s, &cache, ccfg.threads);
  return 0;
}

int cmd_export_images(const std::string& condensed, const std::string& out_dir,
                      const std::string& layout) {
  if (layout != "codes-by-decoders")
    throw Error("export-images: unsupported layout \"" + layout + "\"");
  CondensedContainer model = load_kfs1(condensed);
  export_image_grids(out_dir, model);
  return 0;
}

int cmd_make_demo_data(const std::string& out_dir, int n_train, int n_test, std::uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  save_raw_f32(std::filesystem::path(out_dir) / "train.kfsr", make_demo_digits(n_train, seed));
  save_raw_f32(std::filesystem::path(out_dir) / "test.kfsr", make_demo_digits(n_test, seed + 1));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dataset condensation with factorized latent codes and shared decoders"};
  app.require_subcommand(1);

  std::string config_path, condensed_path, out_path, layout = "codes-by-decoders";
  std::string seed_range, diagnose_what;
  std::vector<int> budget_steps;
  int n_train = 100, n_test = 200;
  std::uint64_t seed = 7;

  CLI::App* c_condense = app.add_subcommand("condense", "learn a condensed set from a dataset");
  c_condense->add_option("--config", config_path, "JSON config")->required();

  CLI::App* c_eval = app.add_subcommand("eval", "train classifiers on a condensed set");
  c_eval->add_option("--config", config_path, "JSON config")->required();
  c_eval->add_option("--condensed", condensed_path, "KFS1 container")->required();
  c_eval->add_option("--budget-steps", budget_steps, "comma-separated training-step budgets")
      ->delimiter(',');
  c_eval->add_option("--out", out_path, "CSV output path (default stdout)");

  CLI::App* c_diag = app.add_subcommand("diagnose", "closed-form vs exhaustive diagnostics");
  c_diag->add_option("what", diagnose_what, "bias | variance | budget")->required();
  c_diag->add_option("--config", config_path, "JSON config");
  c_diag->add_option("--out", out_path, "CSV output path (default stdout)");

  CLI::App* c_grad = app.add_subcommand("gradcheck", "finite-difference audit of all primitives");
  c_grad->add_option("--out", out_path, "CSV output path (default stdout)");

  CLI::App* c_cache = app.add_subcommand("cache-means", "precompute per-seed embedding means");
  c_cache->add_option("--config", config_path, "JSON config")->required();
  c_cache->add_option("--seeds", seed_range, "seed range a..b")->required();

  CLI::App* c_export = app.add_subcommand("export-images", "write per-class PPM grids");
  c_export->add_option("--condensed", condensed_path, "KFS1 container")->required();
  c_export->add_option("--out", out_path, "output directory")->required();
  c_export->add_option("--layout", layout, "grid layout (codes-by-decoders)");

  CLI::App* c_demo = app.add_subcommand("make-demo-data", "generate the two-class digit task");
  c_demo->add_option("--out", out_path, "output directory")->required();
  c_demo->add_option("--n-train", n_train, "training images per class");
  c_demo->add_option("--n-test", n_test, "test images per class");
  c_demo->add_option("--seed", seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_condense->parsed()) return cmd_condense(config_path);
    if (c_eval->parsed()) return cmd_eval(config_path, condensed_path, budget_steps, out_path);
    if (c_diag->parsed()) return cmd_diagnose(diagnose_what, config_path, out_path);
    if (c_grad->parsed()) return cmd_gradcheck(out_path);
    if (c_cache->parsed()) return cmd_cache_means(config_path, seed_range);
    if (c_export->parsed()) return cmd_export_images(condensed_path, out_path, layout);
    if (c_demo->parsed()) return cmd_make_demo_data(out_path, n_train, n_test, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
