#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "kfs/cache.hpp"
#include "kfs/data.hpp"
#include "kfs/matching.hpp"
#include "toy.hpp"

using namespace kfs;
using namespace kfs::test;

TEST_CASE("mmd loss is zero at an exact match and positive otherwise") {
  Toy<double> toy = make_toy<double>(2, 3, 2, 2, 3, 8, 8, 100);
  CHECK(mmd_loss(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats) > 0.0);

  // use the synthetic means themselves as the real means: residuals vanish
  Tensor<double> synth_means = toy.real_means;
  const int C = 2, E = toy.g.embed_dim();
  for (int c = 0; c < C; ++c) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(E);
    for (int d = 0; d < 2; ++d)
      for (int m = 0; m < 2; ++m) {
        Tensor<double> img = synthesize(toy.cb, toy.bank, c, m, d);
        Tensor<double> emb = toy.g.embed_value(
            standardize(img.reshaped({1, 3, 8, 8}), toy.stats));
        mean += emb.vec();
      }
    synth_means.vec().segment(static_cast<std::int64_t>(c) * E, E) = mean / 4.0;
  }
  CHECK(mmd_loss(synth_means, toy.cb, toy.bank, toy.g, toy.stats) < 1e-22);

  auto [loss, grads] = full_gradient(synth_means, toy.cb, toy.bank, toy.g, toy.stats);
  CHECK(loss < 1e-22);
  CHECK(grads.flatten().norm() < 1e-12);  // zero residual annihilates the gradient
}

TEST_CASE("mmd loss single-class plug-in value") {
  // E = 2 via a width-2 net on 8x8 input; zero weights force zero embeddings
  Toy<double> toy = make_toy<double>(1, 1, 1, 1, 3, 8, 2, 200);
  for (auto& l : toy.g.layers) {
    l.w.array() = 0.0;
    l.b.array() = 0.0;
  }
  REQUIRE(toy.g.embed_dim() == 2);
  Tensor<double> means = Tensor<double>::from({1, 2}, {1.0, 0.0});
  CHECK(mmd_loss(means, toy.cb, toy.bank, toy.g, toy.stats) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("mmd loss equals a straight-line reference that materializes every embedding") {
  Toy<double> toy = make_toy<double>(3, 4, 3, 2, 3, 8, 8, 300);
  const int C = 3, M = 3, D = 2, E = toy.g.embed_dim();
  double want = 0;
  for (int c = 0; c < C; ++c) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(E);
    for (int d = 0; d < D; ++d)
      for (int m = 0; m < M; ++m) {
        Tensor<double> img = synthesize(toy.cb, toy.bank, c, m, d);
        s += toy.g.embed_value(standardize(img.reshaped({1, 3, 8, 8}), toy.stats)).vec();
      }
    s /= static_cast<double>(M * D);
    Eigen::VectorXd u = toy.real_means.vec().segment(static_cast<std::int64_t>(c) * E, E);
    want += 0.5 * (u - s).squaredNorm();
  }
  want /= C;
  const double got = mmd_loss(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  CHECK(std::abs(got - want) / std::abs(want) < 1e-6);
}

TEST_CASE("full_gradient equals backward of the loss graph exactly") {
  Toy<float> toy = make_toy<float>(2, 3, 2, 2, 3, 8, 8, 400);
  auto [loss, grads] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);

  Tape<float> t;
  MmdGraph<float> gr = build_mmd_graph(t, toy.real_means, toy.cb, toy.bank, toy.g, toy.stats, true);
  t.backward(gr.loss);
  ModelGrads<float> direct = extract_grads(t, gr.model, toy.cb, toy.bank);

  CHECK(loss == gr.loss.value().item());
  CHECK(bit_equal(grads.codes, direct.codes));
  for (std::size_t d = 0; d < grads.dec_w.size(); ++d)
    for (std::size_t l = 0; l < grads.dec_w[d].size(); ++l) {
      CHECK(bit_equal(grads.dec_w[d][l], direct.dec_w[d][l]));
      CHECK(bit_equal(grads.dec_b[d][l], direct.dec_b[d][l]));
    }
}

TEST_CASE("full_gradient matches central finite differences on a toy instance") {
  Toy<double> toy = make_toy<double>(2, 2, 2, 2, 3, 8, 8, 500);
  auto [loss, grads] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  CHECK(loss > 0);

  auto loss_value = [&]() {
    return mmd_loss(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  };
  std::vector<Tensor<double>*> params = model_params(toy.cb, toy.bank);
  std::vector<Tensor<double>> fd = fd_gradients<double>(params, loss_value, 1e-5);

  Eigen::VectorXd fd_flat(grads.flat_size());
  std::int64_t at = 0;
  for (const Tensor<double>& g : fd) {
    fd_flat.segment(at, g.size()) = g.vec();
    at += g.size();
  }
  const Eigen::VectorXd got_flat = grads.flatten();
  CHECK(rel_l2_err<double>(got_flat, fd_flat, 1e-12) < 1e-6);
  Tensor<double> fd_t = Tensor<double>::from(
      {static_cast<int>(fd_flat.size())},
      std::vector<double>(fd_flat.data(), fd_flat.data() + fd_flat.size()));
  Tensor<double> got_t = Tensor<double>::from(
      {static_cast<int>(got_flat.size())},
      std::vector<double>(got_flat.data(), got_flat.data() + got_flat.size()));
  CHECK(max_rel_err(got_t, fd_t, 1e-10) < 1e-6);
}

TEST_CASE("sharded full gradient is deterministic and matches the single tape") {
  Toy<float> toy = make_toy<float>(3, 2, 2, 2, 3, 8, 8, 600);
  auto [l1, g1] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  auto [l2, g2] = full_gradient_sharded(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats, 1);
  auto [l3, g3] = full_gradient_sharded(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats, 3);

  // thread count must not change a single bit
  CHECK(l2 == l3);
  CHECK(bit_equal(g2.codes, g3.codes));
  for (std::size_t d = 0; d < g2.dec_w.size(); ++d)
    for (std::size_t l = 0; l < g2.dec_w[d].size(); ++l) CHECK(bit_equal(g2.dec_w[d][l], g3.dec_w[d][l]));

  // and the sharded reduction agrees with the one-tape gradient numerically
  CHECK(std::abs(l1 - l2) / l1 < 1e-6f);
  CHECK(rel_l2_err<float>(g1.flatten(), g2.flatten(), 1e-12f) < 1e-6f);
}

TEST_CASE("chunked gradient: single chunk reproduces the full gradient") {
  Toy<double> toy = make_toy<double>(2, 2, 2, 2, 3, 8, 8, 700);
  auto [loss, full] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  ChunkedGradient<double> cg(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  CHECK(std::abs(cg.loss() - loss) / loss < 1e-12);
  std::vector<Triple> everything = all_triples(2, 2, 2);
  cg.accumulate(everything);
  CHECK(cg.complete());
  ModelGrads<double> got = cg.take();
  CHECK(rel_l2_err<double>(got.flatten(), full.flatten(), 1e-15) < 1e-12);
}

TEST_CASE("chunked gradient: disjoint partitions sum to the full gradient (f32)") {
  Toy<float> toy = make_toy<float>(2, 2, 3, 2, 3, 8, 8, 800);
  auto [loss, full] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  (void)loss;
  std::vector<Triple> triples = all_triples(2, 3, 2);

  // two halves
  {
    ChunkedGradient<float> cg(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
    const std::size_t half = triples.size() / 2;
    cg.accumulate(std::span<const Triple>(triples.data(), half));
    CHECK_FALSE(cg.complete());
    cg.accumulate(std::span<const Triple>(triples.data() + half, triples.size() - half));
    ModelGrads<float> got = cg.take();
    CHECK(rel_l2_err<float>(got.flatten(), full.flatten(), 1e-12f) < 1e-6f);
  }
  // chunks of one triple
  {
    ChunkedGradient<float> cg(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
    for (const Triple& tr : triples) cg.accumulate(std::span<const Triple>(&tr, 1));
    ModelGrads<float> got = cg.take();
    CHECK(rel_l2_err<float>(got.flatten(), full.flatten(), 1e-12f) < 1e-6f);
  }
}

TEST_CASE("chunk of one triple only touches its code slot and decoder") {
  Toy<float> toy = make_toy<float>(2, 2, 3, 2, 3, 8, 8, 900);
  Triple tr{1, 2, 0};
  ModelGrads<float> g =
      chunked_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats,
                       std::span<const Triple>(&tr, 1));
  const std::int64_t cn = toy.cb.code_numel();
  for (int c = 0; c < 2; ++c)
    for (int m = 0; m < 3; ++m) {
      const float norm = g.codes.vec().segment((static_cast<std::int64_t>(c) * 3 + m) * cn, cn).norm();
      if (c == tr.c && m == tr.m)
        CHECK(norm > 0.f);
      else
        CHECK(norm == 0.f);
    }
  for (std::size_t l = 0; l < g.dec_w[0].size(); ++l) {
    CHECK(g.dec_w[0][l].vec().norm() > 0.f);
    CHECK(g.dec_w[1][l].vec().norm() == 0.f);
  }
}

TEST_CASE("overlapping chunks are rejected") {
  Toy<float> toy = make_toy<float>(1, 2, 3, 1, 3, 8, 8, 1000);
  ChunkedGradient<float> cg(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  std::vector<Triple> a = {{0, 0, 0}, {0, 1, 0}};
  std::vector<Triple> b = {{0, 1, 0}};  // overlaps a
  cg.accumulate(a);
  CHECK_THROWS_WITH_AS(cg.accumulate(b), doctest::Contains("more than one chunk"), Error);
  CHECK_THROWS_AS(cg.take(), Error);  // still incomplete
}

TEST_CASE("full-batch gradient touches every code slot") {
  // generic position: every per-class residual is nonzero, so every code and
  // every decoder must receive gradient from every step
  Toy<float> toy = make_toy<float>(3, 2, 4, 3, 3, 8, 8, 1050);
  auto [loss, grads] = full_gradient(toy.real_means, toy.cb, toy.bank, toy.g, toy.stats);
  CHECK(loss > 0);
  const std::int64_t cn = toy.cb.code_numel();
  for (int c = 0; c < 3; ++c)
    for (int m = 0; m < 4; ++m)
      CHECK(grads.codes.vec().segment((static_cast<std::int64_t>(c) * 4 + m) * cn, cn).norm() > 0.f);
  for (std::size_t d = 0; d < grads.dec_w.size(); ++d)
    for (std::size_t l = 0; l < grads.dec_w[d].size(); ++l)
      CHECK(grads.dec_w[d][l].vec().norm() > 0.f);
}

TEST_CASE("embedding-dimension mismatch is reported") {
  Toy<float> toy = make_toy<float>(2, 2, 2, 2, 3, 8, 8, 1100);
  Tensor<float> wrong({2, toy.g.embed_dim() + 1});
  CHECK_THROWS_WITH_AS(mmd_loss(wrong, toy.cb, toy.bank, toy.g, toy.stats),
                       doctest::Contains("embedding dimension mismatch"), Error);
}

// ---- embedding-mean cache ----

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("kfs_test_" + std::to_string(mix64(reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("mean cache round trip and hit semantics") {
  TempDir tmp;
  EmbeddingMeanCache cache(tmp.path);
  Dataset ds = make_demo_digits(12, 42);
  ChannelStats<float> stats = ds.compute_stats();
  FeatureNetConfig gcfg;
  gcfg.in_channels = 1;
  gcfg.in_h = gcfg.in_w = 16;
  gcfg.width = 8;
  gcfg.depth = 3;

  ds.reset_access_count();
  MeanEntry first = compute_or_load_means(ds, gcfg, stats, 7, &cache);
  CHECK(ds.access_count() == 24);  // every example read exactly once
  CHECK(first.n_per_class == std::vector<int>{12, 12});

  MeanEntry second = compute_or_load_means(ds, gcfg, stats, 7, &cache);
  CHECK(ds.access_count() == 24);  // cache hit: no data touched
  CHECK(bit_equal(first.means, second.means));

  // fresh computation with the same key is bit-identical to the cached one
  FeatureNetConfig seeded = gcfg;
  seeded.init_seed = 7;
  Tensor<float> direct = compute_class_means(ds, build_feature_net<float>(seeded), stats);
  CHECK(bit_equal(first.means, direct));

  // different seed, different entry
  MeanEntry other = compute_or_load_means(ds, gcfg, stats, 8, &cache);
  CHECK_FALSE(bit_equal(first.means, other.means));
}

TEST_CASE("single-example classes give the example's own embedding") {
  Dataset ds = make_demo_digits(1, 99);
  ChannelStats<float> stats = ChannelStats<float>::identity(1);
  FeatureNetConfig gcfg;
  gcfg.in_channels = 1;
  gcfg.in_h = gcfg.in_w = 16;
  gcfg.width = 8;
  gcfg.depth = 3;
  gcfg.init_seed = 3;
  FeatureNet<float> g = build_feature_net<float>(gcfg);
  Tensor<float> means = compute_class_means(ds, g, stats);
  for (int c = 0; c < 2; ++c) {
    Tensor<float> img = ds.gather(ds.class_indices(c));
    Tensor<float> emb = g.embed_value(standardize(img, stats));
    const int E = g.embed_dim();
    CHECK((means.vec().segment(static_cast<std::int64_t>(c) * E, E) - emb.vec()).norm() == 0.f);
  }
}

TEST_CASE("two-pass means match a streaming one-pass oracle") {
  Dataset ds = make_demo_digits(40, 17);
  ChannelStats<float> stats = ds.compute_stats();
  FeatureNetConfig gcfg;
  gcfg.in_channels = 1;
  gcfg.in_h = gcfg.in_w = 16;
  gcfg.width = 8;
  gcfg.depth = 3;
  gcfg.init_seed = 11;
  FeatureNet<float> g = build_feature_net<float>(gcfg);
  Tensor<float> means = compute_class_means(ds, g, stats);

  const int E = g.embed_dim();
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXf running = Eigen::VectorXf::Zero(E);
    int k = 0;
    for (int i : ds.class_indices(c)) {
      Tensor<float> one = ds.gather(std::vector<int>{i});
      Tensor<float> emb = g.embed_value(standardize(one, stats));
      ++k;
      running += (emb.vec() - running) / static_cast<float>(k);
    }
    Eigen::VectorXf got = means.vec().segment(static_cast<std::int64_t>(c) * E, E);
    CHECK((got - running).norm() / running.norm() < 1e-6f);
  }
}

TEST_CASE("corrupt cache entries are recomputed with a warning") {
  TempDir tmp;
  EmbeddingMeanCache cache(tmp.path);
  Dataset ds = make_demo_digits(6, 5);
  ChannelStats<float> stats = ds.compute_stats();
  FeatureNetConfig gcfg;
  gcfg.in_channels = 1;
  gcfg.in_h = gcfg.in_w = 16;
  gcfg.width = 8;
  gcfg.depth = 3;

  MeanEntry good = compute_or_load_means(ds, gcfg, stats, 1, &cache);
  const MeanCacheKey key = make_mean_key(ds, gcfg, stats, 1);

  // clobber the stored entry
  {
    std::ofstream f(cache.entry_path(key), std::ios::binary | std::ios::trunc);
    f << "garbage";
  }
  CHECK_FALSE(cache.load(key).has_value());
  MeanEntry re = compute_or_load_means(ds, gcfg, stats, 1, &cache);
  CHECK(bit_equal(good.means, re.means));
  CHECK(cache.load(key).has_value());  // overwritten with a valid entry
}
