#include "kfs/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "kfs/diagnostics.hpp"

namespace kfs {

// ---- Adam ----

Adam::Adam(std::vector<Group> groups, float beta1, float beta2, float eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Group& g : groups_) {
    if (!g.param || g.lr <= 0) throw Error("adam: every group needs a parameter and a positive lr");
    m_.emplace_back(g.param->shape());
    v_.emplace_back(g.param->shape());
  }
}

void Adam::step(const std::vector<const Tensor<float>*>& grads) {
  if (grads.size() != groups_.size())
    throw Error("adam: got " + std::to_string(grads.size()) + " gradients for " +
                std::to_string(groups_.size()) + " groups");
  ++t_;
  const float c1 = 1.f - std::pow(beta1_, static_cast<float>(t_));
  const float c2 = 1.f - std::pow(beta2_, static_cast<float>(t_));
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const Tensor<float>& g = *grads[i];
    Tensor<float>& p = *groups_[i].param;
    if (!g.same_shape(p)) throw Error("adam: gradient shape mismatch in group " + std::to_string(i));
    auto m = m_[i].array(), v = v_[i].array();
    m = beta1_ * m + (1.f - beta1_) * g.array();
    v = beta2_ * v + (1.f - beta2_) * g.array().square();
    p.array() -= groups_[i].lr * (m / c1) / ((v / c2).sqrt() + eps_);
  }
}

AdamStateBlob Adam::state() const {
  AdamStateBlob blob;
  blob.m = m_;
  blob.v = v_;
  blob.step = t_;
  return blob;
}

void Adam::restore(const AdamStateBlob& blob) {
  if (blob.m.size() != groups_.size() || blob.v.size() != groups_.size())
    throw Error("adam: state blob does not match group count");
  for (std::size_t i = 0; i < groups_.size(); ++i)
    if (!blob.m[i].same_shape(*groups_[i].param))
      throw Error("adam: state blob shape mismatch in group " + std::to_string(i));
  m_ = blob.m;
  v_ = blob.v;
  t_ = blob.step;
}

// ---- decoder pretraining ----

namespace {

float reconstruction_mse(const Encoder<float>& enc, const Decoder<float>& dec,
                         const Tensor<float>& batch) {
  Tensor<float> recon = decode_value(dec, encode_value(enc, batch));
  return static_cast<float>((recon.array() - batch.array()).square().mean());
}

std::vector<int> sample_batch_indices(const CounterRng& rng, std::uint64_t step, int batch, int n) {
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (int j = 0; j < batch; ++j)
    idx[static_cast<std::size_t>(j)] = static_cast<int>(
        rng.index(step * static_cast<std::uint64_t>(batch) + static_cast<std::uint64_t>(j),
                  static_cast<std::uint64_t>(n)));
  return idx;
}

}  // namespace

PretrainResult pretrain_decoder(const Dataset& train, const DecoderSpec& spec,
                                const PretrainConfig& cfg) {
  validate(spec);
  if (train.size() == 0) throw Error("pretrain: empty dataset");
  if (spec.out_channels != train.channels() || spec.out_h != train.height() ||
      spec.out_w != train.width())
    throw Error("pretrain: decoder output shape does not match dataset images");

  PretrainResult res;
  res.decoder = build_decoder<float>(spec, mix64(cfg.seed ^ fnv1a64("pretrain/decoder")));
  res.encoder = build_encoder<float>(spec, mix64(cfg.seed ^ fnv1a64("pretrain/encoder")));

  CounterRng probe_rng(cfg.seed, "pretrain-probe");
  const int probe_n = std::min(train.size(), 64);
  std::vector<int> probe_idx = sample_batch_indices(probe_rng, 0, probe_n, train.size());
  Tensor<float> probe = train.gather(probe_idx);
  res.initial_mse = reconstruction_mse(res.encoder, res.decoder, probe);
  if (cfg.steps == 0) {
    res.final_mse = res.initial_mse;
    return res;
  }

  std::vector<Adam::Group> groups;
  for (ConvLayer<float>& l : res.encoder.layers) {
    groups.push_back({&l.w, cfg.lr});
    groups.push_back({&l.b, cfg.lr});
  }
  for (std::size_t l = 0; l < res.decoder.w.size(); ++l) {
    groups.push_back({&res.decoder.w[l], cfg.lr});
    groups.push_back({&res.decoder.b[l], cfg.lr});
  }
  Adam adam(groups);

  CounterRng batch_rng(cfg.seed, "pretrain-batch");
  const int batch = std::min(cfg.batch, train.size());
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<float> x =
        train.gather(sample_batch_indices(batch_rng, static_cast<std::uint64_t>(step), batch, train.size()));
    Tape<float> t;
    BoundEncoder<float> be = bind_encoder(t, res.encoder, true);
    BoundDecoder<float> bd = bind_decoder(t, res.decoder, true);
    Var<float> xe = t.constant(x);
    Var<float> recon = decode(t, bd, encode(t, be, xe));
    Var<float> diff = sub(recon, xe);
    Var<float> loss = scale(dot(diff, diff), 1.f / static_cast<float>(x.size()));
    const float lv = loss.value().item();
    if (!std::isfinite(lv))
      throw Error("pretrain: non-finite reconstruction loss at step " + std::to_string(step));
    t.backward(loss);
    std::vector<Tensor<float>> grads;
    for (std::size_t i = 0; i < be.w.size(); ++i) {
      grads.push_back(t.grad(be.w[i].id));
      grads.push_back(t.grad(be.b[i].id));
    }
    for (std::size_t i = 0; i < bd.w.size(); ++i) {
      grads.push_back(t.grad(bd.w[i].id));
      grads.push_back(t.grad(bd.b[i].id));
    }
    std::vector<const Tensor<float>*> gp;
    for (const Tensor<float>& g : grads) gp.push_back(&g);
    adam.step(gp);
  }
  res.final_mse = reconstruction_mse(res.encoder, res.decoder, probe);
  return res;
}

// ---- condensation ----

namespace {

LatentCodebook<float> init_codes(const Dataset& train, const DecoderSpec& spec,
                                 const CondenseConfig& cfg, const Encoder<float>* encoder) {
  const int C = train.num_classes(), M = cfg.codes_per_class;
  LatentCodebook<float> cb = make_codebook<float>(C, M, spec);
  if (encoder) {
    // encode M distinct real images per class through the pretrained encoder
    CounterRng rng(cfg.base_seed, "code-init");
    std::uint64_t ctr = 0;
    const std::int64_t cn = cb.code_numel();
    for (int c = 0; c < C; ++c) {
      std::vector<int> pool = train.class_indices(c);
      if (static_cast<int>(pool.size()) < M)
        throw Error("code init: class " + std::to_string(c) + " has fewer than M = " +
                    std::to_string(M) + " examples");
      for (int j = 0; j < M; ++j) {
        const std::size_t pick =
            static_cast<std::size_t>(j) +
            static_cast<std::size_t>(rng.index(ctr++, pool.size() - static_cast<std::size_t>(j)));
        std::swap(pool[static_cast<std::size_t>(j)], pool[pick]);
      }
      pool.resize(static_cast<std::size_t>(M));
      Tensor<float> codes = encode_value(*encoder, train.gather(pool));
      cb.codes.vec().segment(static_cast<std::int64_t>(c) * M * cn, M * cn) = codes.vec();
    }
  } else {
    CounterRng rng(cfg.base_seed, "code-init-gauss");
    cb.codes = Tensor<float>::gaussian(cb.codes.shape(), rng, cfg.code_init_sigma);
  }
  return cb;
}

std::vector<const Tensor<float>*> grad_pointers(const ModelGrads<float>& g) {
  std::vector<const Tensor<float>*> out;
  out.push_back(&g.codes);
  for (std::size_t d = 0; d < g.dec_w.size(); ++d)
    for (std::size_t l = 0; l < g.dec_w[d].size(); ++l) {
      out.push_back(&g.dec_w[d][l]);
      out.push_back(&g.dec_b[d][l]);
    }
  return out;
}

}  // namespace

CondenseResult condense(const Dataset& train, const ChannelStats<float>& stats,
                        const CondenseConfig& cfg, const EmbeddingMeanCache* cache,
                        const CondenseCheckpoint* resume) {
  if (cfg.steps < 1) throw Error("condense: steps must be >= 1");
  if (cfg.lr_codes <= 0 || cfg.lr_decoders <= 0) throw Error("condense: learning rates must be positive");
  if (cfg.codes_per_class < 1 || cfg.num_decoders < 1)
    throw Error("condense: need at least one code and one decoder");
  if (train.size() == 0) throw Error("condense: empty dataset");

  const DecoderSpec spec =
      decoder_spec_for(cfg.decoder, train.channels(), train.height(), train.width());
  const int C = train.num_classes(), M = cfg.codes_per_class, D = cfg.num_decoders;

  LatentCodebook<float> cb;
  DecoderBank<float> bank;
  int start_step = 0;
  if (resume) {
    cb = resume->model.codebook;
    bank = resume->model.bank;
    start_step = resume->step;
    if (cb.num_classes() != C || cb.codes_per_class() != M || bank.size() != D)
      throw Error("condense: checkpoint does not match the configuration");
  } else {
    PretrainResult pre = pretrain_decoder(
        train, spec, {cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr, cfg.base_seed});
    bank.decoders.assign(static_cast<std::size_t>(D), pre.decoder);  // copy rule: all start identical
    if (cfg.decoder_jitter > 0) {
      for (int d = 0; d < D; ++d) {
        CounterRng rng(mix64(cfg.base_seed ^ fnv1a64("decoder-jitter")), "d" + std::to_string(d));
        std::uint64_t ctr = 0;
        for (Tensor<float>& w : bank.decoders[static_cast<std::size_t>(d)].w)
          for (std::int64_t i = 0; i < w.size(); ++i)
            w[i] += cfg.decoder_jitter * static_cast<float>(rng.gaussian(ctr++));
      }
    }
    cb = init_codes(train, spec, cfg, cfg.pretrain_steps > 0 ? &pre.encoder : nullptr);
  }

  std::vector<Adam::Group> groups;
  groups.push_back({&cb.codes, cfg.lr_codes});
  for (int d = 0; d < D; ++d)
    for (std::size_t l = 0; l < bank.decoders[static_cast<std::size_t>(d)].w.size(); ++l) {
      groups.push_back({&bank.decoders[static_cast<std::size_t>(d)].w[l], cfg.lr_decoders});
      groups.push_back({&bank.decoders[static_cast<std::size_t>(d)].b[l], cfg.lr_decoders});
    }
  Adam adam(std::move(groups));
  if (resume) adam.restore(resume->opt);

  FeatureNetConfig gbase;
  gbase.in_channels = train.channels();
  gbase.in_h = train.height();
  gbase.in_w = train.width();
  gbase.width = cfg.feature_width;
  gbase.depth = cfg.feature_depth;

  const std::vector<Triple> triples = all_triples(C, M, D);
  CounterRng pair_rng(cfg.base_seed, "biased-pair");

  CondenseResult res;
  res.log.reserve(static_cast<std::size_t>(cfg.steps - start_step));
  for (int t = start_step; t < cfg.steps; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed_t = cfg.base_seed + static_cast<std::uint64_t>(t);
    MeanEntry entry = compute_or_load_means(train, gbase, stats, seed_t, cache, cfg.threads);
    FeatureNetConfig gcfg = gbase;
    gcfg.init_seed = seed_t;
    FeatureNet<float> g = build_feature_net<float>(gcfg);

    float loss = 0;
    ModelGrads<float> grads;
    if (cfg.grad_mode == GradMode::kBiasedPair) {
      const int m = static_cast<int>(pair_rng.index(2 * static_cast<std::uint64_t>(t),
                                                    static_cast<std::uint64_t>(M)));
      const int d = static_cast<int>(pair_rng.index(2 * static_cast<std::uint64_t>(t) + 1,
                                                    static_cast<std::uint64_t>(D)));
      std::tie(loss, grads) = synthetic_pair_gradient(entry.means, cb, bank, g, stats, m, d);
    } else if (cfg.chunk_size <= 0) {
      std::tie(loss, grads) = full_gradient_sharded(entry.means, cb, bank, g, stats, cfg.threads);
    } else {
      ChunkedGradient<float> cg(entry.means, cb, bank, g, stats);
      loss = cg.loss();
      for (std::size_t at = 0; at < triples.size(); at += static_cast<std::size_t>(cfg.chunk_size)) {
        const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.chunk_size),
                                                      triples.size() - at);
        cg.accumulate(std::span<const Triple>(triples.data() + at, len));
      }
      grads = cg.take();
    }
    if (!std::isfinite(loss)) throw Error("condense: non-finite loss at step " + std::to_string(t));
    adam.step(grad_pointers(grads));

    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back({t, loss, wall});

    if (!cfg.checkpoint_prefix.empty() && cfg.checkpoint_every > 0 &&
        (t + 1) % cfg.checkpoint_every == 0 && t + 1 < cfg.steps) {
      CondenseCheckpoint ck;
      ck.model = {cb, bank, stats};
      ck.opt = adam.state();
      ck.step = t + 1;
      save_checkpoint(cfg.checkpoint_prefix.string() + "_step" + std::to_string(t + 1), ck);
    }
  }

  res.model = {std::move(cb), std::move(bank), stats};
  return res;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write log " + path.string());
  f << "step,loss,wall_ms\n";
  char buf[96];
  for (const LogRow& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.3f\n", r.step, static_cast<double>(r.loss), r.wall_ms);
    f << buf;
  }
}

// ---- evaluation ----

namespace {

struct Sgd {
  std::vector<Tensor<float>*> params;
  std::vector<Tensor<float>> vel;
  float momentum, weight_decay;

  Sgd(std::vector<Tensor<float>*> ps, float mu, float wd)
      : params(std::move(ps)), momentum(mu), weight_decay(wd) {
    for (Tensor<float>* p : params) vel.emplace_back(p->shape());
  }

  void step(const std::vector<Tensor<float>>& grads, float lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = vel[i].array();
      v = momentum * v + grads[i].array() + weight_decay * params[i]->array();
      params[i]->array() -= lr * v;
    }
  }
};

Tensor<float> gather_rows(const Tensor<float>& images, const std::vector<int>& perm, std::size_t begin,
                          std::size_t end, std::vector<int>* batch_labels,
                          const std::vector<int>& labels) {
  const std::int64_t numel = images.size() / images.dim(0);
  Tensor<float> out(
      {static_cast<int>(end - begin), images.dim(1), images.dim(2), images.dim(3)});
  batch_labels->clear();
  for (std::size_t k = begin; k < end; ++k) {
    const int i = perm[k];
    out.vec().segment(static_cast<std::int64_t>(k - begin) * numel, numel) =
        images.vec().segment(static_cast<std::int64_t>(i) * numel, numel);
    batch_labels->push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

double top1_accuracy(const Classifier<float>& clf, const Tensor<float>& images_std,
                     const std::vector<int>& labels) {
  const int n = images_std.dim(0);
  int correct = 0;
  constexpr int kBatch = 256;
  const std::int64_t numel = images_std.size() / n;
  for (int at = 0; at < n; at += kBatch) {
    const int len = std::min(kBatch, n - at);
    Tensor<float> batch({len, images_std.dim(1), images_std.dim(2), images_std.dim(3)});
    batch.vec() = images_std.vec().segment(static_cast<std::int64_t>(at) * numel,
                                           static_cast<std::int64_t>(len) * numel);
    Tensor<float> lg = logits_value(clf, batch);
    const int c = lg.dim(1);
    for (int i = 0; i < len; ++i) {
      Eigen::Index arg;
      lg.vec().segment(static_cast<std::int64_t>(i) * c, c).maxCoeff(&arg);
      if (static_cast<int>(arg) == labels[static_cast<std::size_t>(at + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// one SGD training run; reports accuracy at every step count in `probes`
// (ascending); total steps = probes.back()
std::vector<double> train_classifier_run(const Tensor<float>& images_std,
                                         const std::vector<int>& labels, int num_classes,
                                         const Tensor<float>& test_std,
                                         const std::vector<int>& test_labels, const EvalConfig& cfg,
                                         std::uint64_t run_seed, const std::vector<int>& probes,
                                         const std::vector<int>& decay_steps) {
  const int n = images_std.dim(0);
  const int batch = std::max(1, std::min(cfg.batch, n));

  ClassifierConfig ccfg;
  ccfg.backbone.in_channels = images_std.dim(1);
  ccfg.backbone.in_h = images_std.dim(2);
  ccfg.backbone.in_w = images_std.dim(3);
  ccfg.backbone.width = cfg.width;
  ccfg.backbone.depth = cfg.depth;
  ccfg.backbone.init_seed = run_seed;
  ccfg.num_classes = num_classes;
  Classifier<float> clf = build_classifier<float>(ccfg);
  Sgd sgd(clf.params(), cfg.momentum, cfg.weight_decay);

  CounterRng shuffle_rng(run_seed, "eval-shuffle");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);

  std::vector<double> acc;
  float lr = cfg.lr;
  int step = 0;
  std::size_t probe_at = 0, decay_at = 0;
  std::uint64_t shuffle_ctr = 0;
  const int total_steps = probes.back();
  while (step < total_steps) {
    for (std::size_t i = static_cast<std::size_t>(n) - 1; i > 0; --i) {
      const std::size_t j = shuffle_rng.index(shuffle_ctr++, i + 1);
      std::swap(perm[i], perm[j]);
    }
    for (int at = 0; at < n && step < total_steps; at += batch) {
      const std::size_t end = static_cast<std::size_t>(std::min(at + batch, n));
      std::vector<int> batch_labels;
      Tensor<float> x = gather_rows(images_std, perm, static_cast<std::size_t>(at), end,
                                    &batch_labels, labels);
      Tape<float> t;
      BoundClassifier<float> bc = bind_classifier(t, clf, true);
      Var<float> loss = cross_entropy(logits(t, bc, t.constant(std::move(x))), batch_labels);
      if (!std::isfinite(loss.value().item()))
        throw Error("evaluate: non-finite training loss at step " + std::to_string(step));
      t.backward(loss);
      std::vector<Tensor<float>> grads;
      for (std::size_t l = 0; l < bc.w.size(); ++l) {
        grads.push_back(t.grad(bc.w[l].id));
        grads.push_back(t.grad(bc.b[l].id));
      }
      grads.push_back(t.grad(bc.head_w.id));
      grads.push_back(t.grad(bc.head_b.id));
      while (decay_at < decay_steps.size() && step == decay_steps[decay_at]) {
        lr *= cfg.decay_factor;
        ++decay_at;
      }
      sgd.step(grads, lr);
      ++step;
      while (probe_at < probes.size() && step == probes[probe_at]) {
        acc.push_back(top1_accuracy(clf, test_std, test_labels));
        ++probe_at;
      }
    }
  }
  return acc;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var = xs.size() > 1 ? var / (n - 1) : 0.0;
  return {mean, std::sqrt(var)};
}

}  // namespace

EvalResult evaluate(const Tensor<float>& images, const std::vector<int>& labels, int num_classes,
                    const ChannelStats<float>& stats, const Dataset& test, const EvalConfig& cfg) {
  if (images.rank() != 4 || images.dim(0) == 0) throw Error("evaluate: empty synthetic set");
  if (static_cast<int>(labels.size()) != images.dim(0))
    throw Error("evaluate: label count does not match image count");
  if (test.num_classes() != num_classes)
    throw Error("evaluate: label spaces differ (" + std::to_string(num_classes) + " vs " +
                std::to_string(test.num_classes()) + ")");

  Tensor<float> images_std = standardize(images, stats);
  std::vector<int> all_test(static_cast<std::size_t>(test.size()));
  std::iota(all_test.begin(), all_test.end(), 0);
  Tensor<float> test_std = standardize(test.gather(all_test), stats);

  const int n = images.dim(0);
  const int batch = std::max(1, std::min(cfg.batch, n));
  const int steps_per_epoch = (n + batch - 1) / batch;
  std::vector<int> probes = {cfg.epochs * steps_per_epoch};
  std::vector<int> decay_steps;
  for (int e : cfg.decay_epochs) {
    if (e <= 0 || e >= cfg.epochs) throw Error("evaluate: decay epochs must lie inside (0, epochs)");
    decay_steps.push_back(e * steps_per_epoch);
  }

  EvalResult res;
  for (int r = 0; r < cfg.runs; ++r) {
    const std::uint64_t run_seed = mix64(cfg.seed ^ (0x9e3779b97f4a7c15ull * (r + 1)));
    res.per_run.push_back(train_classifier_run(images_std, labels, num_classes, test_std,
                                               test.labels(), cfg, run_seed, probes, decay_steps)
                              .back());
  }
  std::tie(res.mean, res.stdev) = mean_std(res.per_run);
  return res;
}

std::vector<BudgetSweepRow> evaluate_budget_sweep(const Tensor<float>& images,
                                                  const std::vector<int>& labels, int num_classes,
                                                  const ChannelStats<float>& stats, const Dataset& test,
                                                  const EvalConfig& cfg, std::vector<int> budget_steps) {
  if (budget_steps.empty()) throw Error("budget sweep: need at least one step budget");
  std::sort(budget_steps.begin(), budget_steps.end());
  if (budget_steps.front() < 1) throw Error("budget sweep: budgets must be positive");

  Tensor<float> images_std = standardize(images, stats);
  std::vector<int> all_test(static_cast<std::size_t>(test.size()));
  std::iota(all_test.begin(), all_test.end(), 0);
  Tensor<float> test_std = standardize(test.gather(all_test), stats);

  // learning-rate decay at the same fractions of the budget as the epoch
  // schedule uses of its horizon
  const int total = budget_steps.back();
  std::vector<int> decay_steps;
  for (int e : cfg.decay_epochs)
    decay_steps.push_back(static_cast<int>(static_cast<std::int64_t>(e) * total / cfg.epochs));

  std::vector<std::vector<double>> per_budget(budget_steps.size());
  for (int r = 0; r < cfg.runs; ++r) {
    const std::uint64_t run_seed = mix64(cfg.seed ^ (0x9e3779b97f4a7c15ull * (r + 1)));
    std::vector<double> acc = train_classifier_run(images_std, labels, num_classes, test_std,
                                                   test.labels(), cfg, run_seed, budget_steps,
                                                   decay_steps);
    for (std::size_t b = 0; b < budget_steps.size(); ++b) per_budget[b].push_back(acc[b]);
  }

  std::vector<BudgetSweepRow> rows;
  for (std::size_t b = 0; b < budget_steps.size(); ++b) {
    BudgetSweepRow row;
    row.steps = budget_steps[b];
    row.per_run = per_budget[b];
    std::tie(row.mean, row.stdev) = mean_std(row.per_run);
    rows.push_back(std::move(row));
  }
  return rows;
}

SyntheticDataset<float> random_coreset(const Dataset& ds, int images_per_class, std::uint64_t seed) {
  if (images_per_class < 1) throw Error("random_coreset: need a positive count per class");
  CounterRng rng(seed, "coreset");
  std::uint64_t ctr = 0;
  std::vector<int> chosen;
  std::vector<int> labels;
  for (int c = 0; c < ds.num_classes(); ++c) {
    std::vector<int> pool = ds.class_indices(c);
    if (static_cast<int>(pool.size()) < images_per_class)
      throw Error("random_coreset: class " + std::to_string(c) + " has only " +
                  std::to_string(pool.size()) + " examples, need " + std::to_string(images_per_class));
    for (int j = 0; j < images_per_class; ++j) {
      const std::size_t pick =
          static_cast<std::size_t>(j) +
          static_cast<std::size_t>(rng.index(ctr++, pool.size() - static_cast<std::size_t>(j)));
      std::swap(pool[static_cast<std::size_t>(j)], pool[pick]);
      chosen.push_back(pool[static_cast<std::size_t>(j)]);
      labels.push_back(c);
    }
  }
  return {ds.gather(chosen), std::move(labels)};
}

SyntheticDataset<float> as_eval_set(const Dataset& ds) {
  std::vector<int> all(static_cast<std::size_t>(ds.size()));
  std::iota(all.begin(), all.end(), 0);
  return {ds.gather(all), ds.labels()};
}

}  // namespace kfs
