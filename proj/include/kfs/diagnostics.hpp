#pragma once

#include <optional>
#include <vector>

#include "kfs/matching.hpp"

// Executable forms of the subsampling bias and variance analyses. The two
// routes are deliberately independent: closed forms differentiate an
// explicit expression, exhaustive routines enumerate every outcome of the
// uniform index distribution and aggregate sampled gradients.

namespace kfs {

struct SubsampleScheme {
  enum class Mode { kSyntheticPair, kRealIndex };
  Mode mode = Mode::kSyntheticPair;
  std::uint64_t seed = 0;
};

template <typename S>
struct GradientMoments {
  Eigen::Matrix<S, Eigen::Dynamic, 1> mean;
  Eigen::Matrix<S, Eigen::Dynamic, 1> cov_diag;  // non-negative
  std::int64_t samples = 0;
};

namespace detail {

// standardized embeddings of one real batch, no gradient tracking
template <typename S>
Tensor<S> real_embeddings(const Tensor<S>& batch, const FeatureNet<S>& g, const ChannelStats<S>& stats) {
  return g.embed_value(standardize(batch, stats));
}

}  // namespace detail

// per-class embedding means of raw per-class real batches (N_c x ch x H x W)
template <typename S>
Tensor<S> class_means_from_batches(const std::vector<Tensor<S>>& real_by_class,
                                   const FeatureNet<S>& g, const ChannelStats<S>& stats) {
  const int C = static_cast<int>(real_by_class.size());
  const int E = g.embed_dim();
  Tensor<S> means({C, E});
  for (int c = 0; c < C; ++c) {
    const Tensor<S>& batch = real_by_class[static_cast<std::size_t>(c)];
    if (batch.rank() != 4 || batch.dim(0) == 0)
      throw Error("class " + std::to_string(c) + " real batch must be a non-empty NCHW tensor");
    Tensor<S> emb = detail::real_embeddings(batch, g, stats);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(E);
    for (int i = 0; i < batch.dim(0); ++i)
      acc += emb.vec().segment(static_cast<std::int64_t>(i) * E, E).template cast<double>();
    means.vec().segment(static_cast<std::int64_t>(c) * E, E) =
        (acc / static_cast<double>(batch.dim(0))).template cast<S>();
  }
  return means;
}

// Loss with the synthetic mean replaced by the single sampled pair (m, d),
// shared across classes; gradient of that loss.
template <typename S>
std::pair<S, ModelGrads<S>> synthetic_pair_gradient(const Tensor<S>& real_means,
                                                    const LatentCodebook<S>& cb,
                                                    const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                                    const ChannelStats<S>& stats, int m, int d) {
  detail::check_match_inputs(real_means, cb, bank, g);
  if (m < 0 || m >= cb.codes_per_class() || d < 0 || d >= bank.size())
    throw Error("synthetic_pair_gradient: pair (" + std::to_string(m) + "," + std::to_string(d) +
                ") out of range");
  const int C = cb.num_classes(), E = g.embed_dim();
  Tape<S> t;
  BoundModel<S> bm = bind_model(t, cb, bank, true);
  Var<S> total;
  for (int c = 0; c < C; ++c) {
    Var<S> img = synthesize_one(t, bm, c, m, d);
    Var<S> emb = reshape(g.embed(t, channel_standardize(img, stats.mean, stats.stdev)), {E});
    Var<S> residual = sub(t.constant(detail::row_of(real_means, c)), emb);
    Var<S> term = scale(dot(residual, residual), S(0.5));
    total = total ? add(total, term) : term;
  }
  Var<S> loss = scale(total, S(1) / static_cast<S>(C));
  t.backward(loss);
  return {loss.value().item(), extract_grads(t, bm, cb, bank)};
}

// Loss with the real mean replaced by one sampled example per class
// (independent across classes); the synthetic side stays full batch.
template <typename S>
std::pair<S, ModelGrads<S>> real_index_gradient(const std::vector<Tensor<S>>& real_by_class,
                                                const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                                                const FeatureNet<S>& g, const ChannelStats<S>& stats,
                                                const std::vector<int>& sample_index) {
  const int C = cb.num_classes(), D = bank.size(), E = g.embed_dim();
  if (static_cast<int>(real_by_class.size()) != C || static_cast<int>(sample_index.size()) != C)
    throw Error("real_index_gradient: need one real batch and one index per class");
  Tape<S> t;
  BoundModel<S> bm = bind_model(t, cb, bank, true);
  Var<S> total;
  for (int c = 0; c < C; ++c) {
    const Tensor<S>& batch = real_by_class[static_cast<std::size_t>(c)];
    const int n = sample_index[static_cast<std::size_t>(c)];
    if (batch.dim(0) == 0) throw Error("real_index_gradient: class " + std::to_string(c) + " is empty");
    if (n < 0 || n >= batch.dim(0))
      throw Error("real_index_gradient: index " + std::to_string(n) + " out of range for class " +
                  std::to_string(c));
    Tensor<S> one({1, batch.dim(1), batch.dim(2), batch.dim(3)});
    one.vec() = batch.vec().segment(static_cast<std::int64_t>(n) * batch.size() / batch.dim(0),
                                    batch.size() / batch.dim(0));
    Tensor<S> x_emb = detail::real_embeddings(one, g, stats).reshaped({E});

    Var<S> sum_d;
    for (int d = 0; d < D; ++d) {
      Var<S> md = mean_rows(detail::class_embeddings(t, bm, g, stats, c, d));
      sum_d = sum_d ? add(sum_d, md) : md;
    }
    Var<S> synth_mean = scale(sum_d, S(1) / static_cast<S>(D));
    Var<S> residual = sub(t.constant(std::move(x_emb)), synth_mean);
    Var<S> term = scale(dot(residual, residual), S(0.5));
    total = total ? add(total, term) : term;
  }
  Var<S> loss = scale(total, S(1) / static_cast<S>(C));
  t.backward(loss);
  return {loss.value().item(), extract_grads(t, bm, cb, bank)};
}

// Draws indices per the scheme and evaluates the corresponding gradient.
template <typename S>
std::pair<S, ModelGrads<S>> subsampled_gradient(const SubsampleScheme& scheme,
                                                const std::vector<Tensor<S>>& real_by_class,
                                                const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                                                const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                                const ChannelStats<S>& stats, std::uint64_t draw = 0) {
  CounterRng rng(scheme.seed, "subsample");
  if (scheme.mode == SubsampleScheme::Mode::kSyntheticPair) {
    const int m = static_cast<int>(rng.index(2 * draw, static_cast<std::uint64_t>(cb.codes_per_class())));
    const int d = static_cast<int>(rng.index(2 * draw + 1, static_cast<std::uint64_t>(bank.size())));
    return synthetic_pair_gradient(real_means, cb, bank, g, stats, m, d);
  }
  std::vector<int> idx(static_cast<std::size_t>(cb.num_classes()));
  for (int c = 0; c < cb.num_classes(); ++c) {
    const Tensor<S>& batch = real_by_class[static_cast<std::size_t>(c)];
    if (batch.rank() != 4 || batch.dim(0) == 0)
      throw Error("subsampled_gradient: class " + std::to_string(c) + " has no examples to sample");
    idx[static_cast<std::size_t>(c)] = static_cast<int>(
        rng.index(draw * static_cast<std::uint64_t>(cb.num_classes()) + static_cast<std::uint64_t>(c),
                  static_cast<std::uint64_t>(batch.dim(0))));
  }
  return real_index_gradient(real_by_class, cb, bank, g, stats, idx);
}

// Gradient of the closed-form bias expression: mean self inner product of
// synthetic embeddings minus squared norm of their mean, per class,
// differentiated as written.
template <typename S>
ModelGrads<S> bias_closed_form(const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                               const FeatureNet<S>& g, const ChannelStats<S>& stats) {
  check_compatible(cb, bank);
  const int C = cb.num_classes(), M = cb.codes_per_class(), D = bank.size();
  Tape<S> t;
  BoundModel<S> bm = bind_model(t, cb, bank, true);
  Var<S> total;
  for (int c = 0; c < C; ++c) {
    Var<S> self_sum;  // sum over all (m, d) of ||g_i||^2
    Var<S> mean_sum;  // sum over d of per-decoder embedding means
    for (int d = 0; d < D; ++d) {
      Var<S> emb = detail::class_embeddings(t, bm, g, stats, c, d);
      Var<S> sq = dot(emb, emb);
      self_sum = self_sum ? add(self_sum, sq) : sq;
      Var<S> md = mean_rows(emb);
      mean_sum = mean_sum ? add(mean_sum, md) : md;
    }
    Var<S> mean_term = scale(self_sum, S(1) / (static_cast<S>(D) * static_cast<S>(M)));
    Var<S> synth_mean = scale(mean_sum, S(1) / static_cast<S>(D));
    Var<S> term = scale(sub(mean_term, dot(synth_mean, synth_mean)), S(0.5));
    total = total ? add(total, term) : term;
  }
  Var<S> expr = scale(total, S(1) / static_cast<S>(C));
  t.backward(expr);
  return extract_grads(t, bm, cb, bank);
}

// exact mean of the single-(m,d) subsampled gradient over all M*D pairs
template <typename S>
ModelGrads<S> exhaustive_pair_mean_gradient(const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                                            const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                            const ChannelStats<S>& stats) {
  const int M = cb.codes_per_class(), D = bank.size();
  ModelGrads<S> mean = ModelGrads<S>::zeros_like(cb, bank);
  for (int m = 0; m < M; ++m)
    for (int d = 0; d < D; ++d)
      mean.accumulate(synthetic_pair_gradient(real_means, cb, bank, g, stats, m, d).second);
  const S inv = S(1) / (static_cast<S>(M) * static_cast<S>(D));
  mean.codes.array() *= inv;
  for (auto& dw : mean.dec_w)
    for (auto& w : dw) w.array() *= inv;
  for (auto& db : mean.dec_b)
    for (auto& b : db) b.array() *= inv;
  return mean;
}

template <typename S>
struct ExhaustiveVariance {
  GradientMoments<S> moments;
  S trace = 0;
  std::optional<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> cov;  // full matrix when requested
};

// Variance of the RealIndex-subsampled gradient over every joint outcome of
// independent per-class index draws (the joint space is the product of the
// per-class ranges).
template <typename S>
ExhaustiveVariance<S> exhaustive_real_index_variance(const std::vector<Tensor<S>>& real_by_class,
                                                     const LatentCodebook<S>& cb,
                                                     const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                                     const ChannelStats<S>& stats,
                                                     bool full_matrix = false) {
  using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  const int C = cb.num_classes();
  std::int64_t outcomes = 1;
  for (int c = 0; c < C; ++c) {
    if (real_by_class[static_cast<std::size_t>(c)].dim(0) == 0)
      throw Error("exhaustive variance: class " + std::to_string(c) + " is empty");
    outcomes *= real_by_class[static_cast<std::size_t>(c)].dim(0);
  }

  std::vector<int> idx(static_cast<std::size_t>(C), 0);
  VecX sum, sumsq;
  MatX outer;
  S sq_norm_sum = 0;
  bool first = true;
  for (std::int64_t k = 0; k < outcomes; ++k) {
    VecX flat = real_index_gradient(real_by_class, cb, bank, g, stats, idx).second.flatten();
    if (first) {
      sum = VecX::Zero(flat.size());
      sumsq = VecX::Zero(flat.size());
      if (full_matrix) outer = MatX::Zero(flat.size(), flat.size());
      first = false;
    }
    sum += flat;
    sumsq += flat.cwiseProduct(flat);
    sq_norm_sum += flat.squaredNorm();
    if (full_matrix) outer.noalias() += flat * flat.transpose();
    for (int c = C - 1; c >= 0; --c) {
      if (++idx[static_cast<std::size_t>(c)] < real_by_class[static_cast<std::size_t>(c)].dim(0)) break;
      idx[static_cast<std::size_t>(c)] = 0;
    }
  }
  const S inv = S(1) / static_cast<S>(outcomes);
  ExhaustiveVariance<S> out;
  out.moments.mean = sum * inv;
  out.moments.cov_diag = (sumsq * inv - out.moments.mean.cwiseProduct(out.moments.mean)).cwiseMax(S(0));
  out.moments.samples = outcomes;
  out.trace = sq_norm_sum * inv - out.moments.mean.squaredNorm();
  if (full_matrix) {
    out.cov = outer * inv;
    out.cov->noalias() -= out.moments.mean * out.moments.mean.transpose();
  }
  return out;
}

template <typename S>
struct VarianceResult {
  S trace = 0;
  std::optional<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> cov;
};

// Closed-form variance: (1/C^2) sum_c V_c^T Cov_c V_c with V_c the per-class
// Jacobian mean of synthetic embeddings w.r.t. all parameters and Cov_c the
// empirical covariance of real embeddings. Trace by default; the full
// parameter-space matrix is refused above max_full_params.
template <typename S>
VarianceResult<S> variance_closed_form(const std::vector<Tensor<S>>& real_by_class,
                                       const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                                       const FeatureNet<S>& g, const ChannelStats<S>& stats,
                                       bool full_matrix = false, std::int64_t max_full_params = 5000) {
  using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  const int C = cb.num_classes(), D = bank.size(), E = g.embed_dim();
  if (static_cast<int>(real_by_class.size()) != C)
    throw Error("variance_closed_form: need one real batch per class");
  const std::int64_t P = ModelGrads<S>::zeros_like(cb, bank).flat_size();
  if (full_matrix && P > max_full_params)
    throw Error("variance_closed_form: full matrix refused for " + std::to_string(P) +
                " parameters (limit " + std::to_string(max_full_params) + ")");

  VarianceResult<S> out;
  if (full_matrix) out.cov = MatX::Zero(P, P);
  const S invC2 = S(1) / (static_cast<S>(C) * static_cast<S>(C));

  for (int c = 0; c < C; ++c) {
    const Tensor<S>& batch = real_by_class[static_cast<std::size_t>(c)];
    if (batch.dim(0) == 0) throw Error("variance_closed_form: class " + std::to_string(c) + " is empty");

    // V_c: E x P Jacobian of the synthetic embedding mean, one VJP per row
    Tape<S> t;
    BoundModel<S> bm = bind_model(t, cb, bank, true);
    Var<S> sum_d;
    for (int d = 0; d < D; ++d) {
      Var<S> md = mean_rows(detail::class_embeddings(t, bm, g, stats, c, d));
      sum_d = sum_d ? add(sum_d, md) : md;
    }
    Var<S> synth_mean = scale(sum_d, S(1) / static_cast<S>(D));
    MatX vc(E, P);
    Tensor<S> seed({E});
    for (int e = 0; e < E; ++e) {
      seed.array() = S(0);
      seed[e] = S(1);
      t.vjp(synth_mean, seed);
      vc.row(e) = extract_grads(t, bm, cb, bank).flatten().transpose();
    }

    // empirical covariance of real embeddings for this class
    Tensor<S> emb = detail::real_embeddings(batch, g, stats);
    const int n = batch.dim(0);
    auto gm = emb.mat(n, E);
    Eigen::Matrix<S, Eigen::Dynamic, 1> mu = gm.colwise().mean().transpose();
    MatX cov = gm.transpose() * gm / static_cast<S>(n);
    cov.noalias() -= mu * mu.transpose();

    MatX cv = cov * vc;                                      // E x P
    out.trace += invC2 * cv.cwiseProduct(vc).sum();          // tr(V^T Cov V)
    if (full_matrix) out.cov->noalias() += invC2 * (vc.transpose() * cv);
  }
  return out;
}

// mean cosine over all unordered row pairs; zero-norm rows count as
// orthogonal to everything
template <typename S>
S mean_pairwise_cosine(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& rows) {
  const Eigen::Index k = rows.rows();
  if (k < 2) throw Error("mean_pairwise_cosine: need at least two rows");
  S acc = 0;
  std::int64_t pairs = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j, ++pairs) {
      const S denom = std::max(rows.row(i).norm() * rows.row(j).norm(), S(1e-12));
      acc += rows.row(i).dot(rows.row(j)) / denom;
    }
  return acc / static_cast<S>(pairs);
}

// Mean pairwise cosine similarity of synthetic embeddings within a class,
// averaged over classes. Low values mean codes and decoders produce
// diversified embeddings.
template <typename S>
S diversity_probe(const LatentCodebook<S>& cb, const DecoderBank<S>& bank, const FeatureNet<S>& g,
                  const ChannelStats<S>& stats) {
  check_compatible(cb, bank);
  const int C = cb.num_classes(), M = cb.codes_per_class(), D = bank.size(), E = g.embed_dim();
  const int K = M * D;
  if (K < 2)
    throw Error("diversity_probe: undefined with a single synthetic example per class (M*D = " +
                std::to_string(K) + ")");
  const std::int64_t cn = cb.code_numel();
  Tensor<S> class_codes({M, cb.codes.dim(2), cb.codes.dim(3), cb.codes.dim(4)});
  S total = 0;
  for (int c = 0; c < C; ++c) {
    class_codes.vec() = cb.codes.vec().segment(static_cast<std::int64_t>(c) * M * cn, M * cn);
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> embs(K, E);
    int row = 0;
    for (int d = 0; d < D; ++d) {
      Tensor<S> emb = g.embed_value(
          standardize(decode_value(bank.decoders[static_cast<std::size_t>(d)], class_codes), stats));
      for (int m = 0; m < M; ++m, ++row) embs.row(row) = emb.mat(M, E).row(m);
    }
    total += mean_pairwise_cosine<S>(embs);
  }
  return total / static_cast<S>(C);
}

}  // namespace kfs
