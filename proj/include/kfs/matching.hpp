#pragma once

#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "kfs/factorization.hpp"
#include "kfs/nets.hpp"
#include "kfs/ops.hpp"

namespace kfs {

// standardized copy of an image batch (real or synthetic) for feature nets
template <typename S>
Tensor<S> standardize(const Tensor<S>& batch, const ChannelStats<S>& stats) {
  kernels::check_nchw(batch, "standardize");
  const int n = batch.dim(0), c = batch.dim(1);
  const std::int64_t area = static_cast<std::int64_t>(batch.dim(2)) * batch.dim(3);
  if (static_cast<int>(stats.mean.size()) != c)
    throw Error("standardize: stats channel count mismatch");
  Tensor<S> out(batch.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t off = (static_cast<std::int64_t>(i) * c + ch) * area;
      Eigen::Map<const typename Tensor<S>::ArrayX> xi(batch.data() + off, area);
      Eigen::Map<typename Tensor<S>::ArrayX> oi(out.data() + off, area);
      oi = (xi - stats.mean[static_cast<std::size_t>(ch)]) / stats.stdev[static_cast<std::size_t>(ch)];
    }
  return out;
}

// Gradients w.r.t. every learnable buffer, mirroring the codebook/bank
// layout. flatten() order is canonical: codes row-major, then per decoder
// each layer's weight then bias.
template <typename S>
struct ModelGrads {
  Tensor<S> codes;
  std::vector<std::vector<Tensor<S>>> dec_w, dec_b;

  static ModelGrads zeros_like(const LatentCodebook<S>& cb, const DecoderBank<S>& bank) {
    ModelGrads g;
    g.codes = Tensor<S>(cb.codes.shape());
    g.dec_w.resize(static_cast<std::size_t>(bank.size()));
    g.dec_b.resize(static_cast<std::size_t>(bank.size()));
    for (int d = 0; d < bank.size(); ++d) {
      const Decoder<S>& dec = bank.decoders[static_cast<std::size_t>(d)];
      for (std::size_t l = 0; l < dec.w.size(); ++l) {
        g.dec_w[static_cast<std::size_t>(d)].push_back(Tensor<S>(dec.w[l].shape()));
        g.dec_b[static_cast<std::size_t>(d)].push_back(Tensor<S>(dec.b[l].shape()));
      }
    }
    return g;
  }

  void accumulate(const ModelGrads& o) {
    codes.array() += o.codes.array();
    for (std::size_t d = 0; d < dec_w.size(); ++d)
      for (std::size_t l = 0; l < dec_w[d].size(); ++l) {
        dec_w[d][l].array() += o.dec_w[d][l].array();
        dec_b[d][l].array() += o.dec_b[d][l].array();
      }
  }

  std::int64_t flat_size() const {
    std::int64_t n = codes.size();
    for (std::size_t d = 0; d < dec_w.size(); ++d)
      for (std::size_t l = 0; l < dec_w[d].size(); ++l) n += dec_w[d][l].size() + dec_b[d][l].size();
    return n;
  }

  Eigen::Matrix<S, Eigen::Dynamic, 1> flatten() const {
    Eigen::Matrix<S, Eigen::Dynamic, 1> v(flat_size());
    std::int64_t at = 0;
    v.segment(at, codes.size()) = codes.vec();
    at += codes.size();
    for (std::size_t d = 0; d < dec_w.size(); ++d)
      for (std::size_t l = 0; l < dec_w[d].size(); ++l) {
        v.segment(at, dec_w[d][l].size()) = dec_w[d][l].vec();
        at += dec_w[d][l].size();
        v.segment(at, dec_b[d][l].size()) = dec_b[d][l].vec();
        at += dec_b[d][l].size();
      }
    return v;
  }
};

namespace detail {

template <typename S>
void check_match_inputs(const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                        const DecoderBank<S>& bank, const FeatureNet<S>& g) {
  check_compatible(cb, bank);
  const DecoderSpec& spec = bank.spec();
  if (spec.out_channels != g.cfg.in_channels || spec.out_h != g.cfg.in_h || spec.out_w != g.cfg.in_w)
    throw Error("matching: decoder output " + std::to_string(spec.out_channels) + "x" +
                std::to_string(spec.out_h) + "x" + std::to_string(spec.out_w) +
                " does not match feature net input " + std::to_string(g.cfg.in_channels) + "x" +
                std::to_string(g.cfg.in_h) + "x" + std::to_string(g.cfg.in_w));
  if (real_means.rank() != 2 || real_means.dim(0) != cb.num_classes())
    throw Error("matching: real means must be C x E with C = " + std::to_string(cb.num_classes()));
  if (real_means.dim(1) != g.embed_dim())
    throw Error("matching: embedding dimension mismatch, means have " +
                std::to_string(real_means.dim(1)) + " but feature net produces " +
                std::to_string(g.embed_dim()));
}

template <typename S>
Tensor<S> row_of(const Tensor<S>& m, int r) {
  const std::int64_t cols = m.dim(1);
  Tensor<S> out({static_cast<int>(cols)});
  out.vec() = m.vec().segment(static_cast<std::int64_t>(r) * cols, cols);
  return out;
}

// standardized embeddings of all M codes of class c under decoder d
template <typename S>
Var<S> class_embeddings(Tape<S>& t, const BoundModel<S>& bm, const FeatureNet<S>& g,
                        const ChannelStats<S>& stats, int c, int d) {
  Var<S> imgs = synthesize_class(t, bm, c, d);
  return g.embed(t, channel_standardize(imgs, stats.mean, stats.stdev));
}

}  // namespace detail

template <typename S>
struct MmdGraph {
  Var<S> loss;
  BoundModel<S> model;
};

// Empirical mean matching: the loss records, for every class, the residual
// between the (precomputed) real embedding mean and the synthetic embedding
// mean over all D*M pairs. No synthetic subsampling.
template <typename S>
MmdGraph<S> build_mmd_graph(Tape<S>& t, const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                            const DecoderBank<S>& bank, const FeatureNet<S>& g,
                            const ChannelStats<S>& stats, bool trainable = true) {
  detail::check_match_inputs(real_means, cb, bank, g);
  const int C = cb.num_classes(), D = bank.size();
  MmdGraph<S> gr;
  gr.model = bind_model(t, cb, bank, trainable);
  Var<S> total;
  for (int c = 0; c < C; ++c) {
    Var<S> sum_d;
    for (int d = 0; d < D; ++d) {
      Var<S> md = mean_rows(detail::class_embeddings(t, gr.model, g, stats, c, d));
      sum_d = sum_d ? add(sum_d, md) : md;
    }
    Var<S> synth_mean = scale(sum_d, S(1) / static_cast<S>(D));
    Var<S> residual = sub(t.constant(detail::row_of(real_means, c)), synth_mean);
    Var<S> term = scale(dot(residual, residual), S(0.5));
    total = total ? add(total, term) : term;
  }
  gr.loss = scale(total, S(1) / static_cast<S>(C));
  return gr;
}

template <typename S>
S mmd_loss(const Tensor<S>& real_means, const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
           const FeatureNet<S>& g, const ChannelStats<S>& stats) {
  Tape<S> t;
  return build_mmd_graph(t, real_means, cb, bank, g, stats, false).loss.value().item();
}

template <typename S>
ModelGrads<S> extract_grads(Tape<S>& t, const BoundModel<S>& bm, const LatentCodebook<S>& cb,
                            const DecoderBank<S>& bank) {
  ModelGrads<S> g = ModelGrads<S>::zeros_like(cb, bank);
  g.codes = t.grad(bm.codes.id);
  for (std::size_t d = 0; d < bm.decoders.size(); ++d)
    for (std::size_t l = 0; l < bm.decoders[d].w.size(); ++l) {
      g.dec_w[d][l] = t.grad(bm.decoders[d].w[static_cast<std::size_t>(l)].id);
      g.dec_b[d][l] = t.grad(bm.decoders[d].b[static_cast<std::size_t>(l)].id);
    }
  return g;
}

// Gradient over all classes and all (m, d) pairs in one recorded graph;
// identical to backward() of the loss by construction.
template <typename S>
std::pair<S, ModelGrads<S>> full_gradient(const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                                          const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                          const ChannelStats<S>& stats) {
  Tape<S> t;
  MmdGraph<S> gr = build_mmd_graph(t, real_means, cb, bank, g, stats, true);
  t.backward(gr.loss);
  return {gr.loss.value().item(), extract_grads(t, gr.model, cb, bank)};
}

// contiguous class ranges for parallel evaluation
struct ClassShard {
  int begin = 0, end = 0;
};

inline std::vector<ClassShard> make_shards(int num_classes, int shards) {
  shards = std::max(1, std::min(shards, num_classes));
  std::vector<ClassShard> out;
  const int base = num_classes / shards, extra = num_classes % shards;
  int at = 0;
  for (int s = 0; s < shards; ++s) {
    const int len = base + (s < extra ? 1 : 0);
    out.push_back({at, at + len});
    at += len;
  }
  return out;
}

// Same full-batch gradient evaluated one class per tape; per-class partial
// gradients are reduced class-major regardless of thread count, so the
// result is a pure function of the inputs.
template <typename S>
std::pair<S, ModelGrads<S>> full_gradient_sharded(const Tensor<S>& real_means,
                                                  const LatentCodebook<S>& cb,
                                                  const DecoderBank<S>& bank, const FeatureNet<S>& g,
                                                  const ChannelStats<S>& stats, int threads = 1) {
  detail::check_match_inputs(real_means, cb, bank, g);
  const int C = cb.num_classes(), D = bank.size();
  std::vector<ModelGrads<S>> per_class(static_cast<std::size_t>(C));
  std::vector<S> per_class_loss(static_cast<std::size_t>(C), S(0));

  auto run_class = [&](int c) {
    Tape<S> t;
    BoundModel<S> bm = bind_model(t, cb, bank, true);
    Var<S> sum_d;
    for (int d = 0; d < D; ++d) {
      Var<S> md = mean_rows(detail::class_embeddings(t, bm, g, stats, c, d));
      sum_d = sum_d ? add(sum_d, md) : md;
    }
    Var<S> synth_mean = scale(sum_d, S(1) / static_cast<S>(D));
    Var<S> residual = sub(t.constant(detail::row_of(real_means, c)), synth_mean);
    Var<S> term = scale(scale(dot(residual, residual), S(0.5)), S(1) / static_cast<S>(C));
    t.backward(term);
    per_class_loss[static_cast<std::size_t>(c)] = term.value().item();
    per_class[static_cast<std::size_t>(c)] = extract_grads(t, bm, cb, bank);
  };

  const std::vector<ClassShard> shards = make_shards(C, threads);
  if (shards.size() <= 1) {
    for (int c = 0; c < C; ++c) run_class(c);
  } else {
    std::vector<std::thread> pool;
    for (const ClassShard& sh : shards)
      pool.emplace_back([&, sh] {
        for (int c = sh.begin; c < sh.end; ++c) run_class(c);
      });
    for (std::thread& th : pool) th.join();
  }

  ModelGrads<S> total = ModelGrads<S>::zeros_like(cb, bank);
  S loss = 0;
  for (int c = 0; c < C; ++c) {
    total.accumulate(per_class[static_cast<std::size_t>(c)]);
    loss += per_class_loss[static_cast<std::size_t>(c)];
  }
  return {loss, total};
}

// ---- memory-bounded exact gradient ----

struct Triple {
  int c = 0, m = 0, d = 0;
};

inline std::vector<Triple> all_triples(int C, int M, int D) {
  std::vector<Triple> out;
  out.reserve(static_cast<std::size_t>(C) * M * D);
  for (int c = 0; c < C; ++c)
    for (int m = 0; m < M; ++m)
      for (int d = 0; d < D; ++d) out.push_back({c, m, d});
  return out;
}

// Residuals come from the full synthetic mean computed without gradient
// tracking; backprop then flows through one chunk of (c, m, d) triples at a
// time. Summing chunk gradients over a partition reproduces the full
// gradient (not merely in expectation).
template <typename S>
class ChunkedGradient {
 public:
  ChunkedGradient(const Tensor<S>& real_means, const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                  const FeatureNet<S>& g, const ChannelStats<S>& stats)
      : cb_(&cb), bank_(&bank), g_(&g), stats_(&stats) {
    detail::check_match_inputs(real_means, cb, bank, g);
    const int C = cb.num_classes(), M = cb.codes_per_class(), D = bank.size();
    const int E = g.embed_dim();
    residuals_ = Tensor<S>({C, E});
    loss_ = 0;
    const std::int64_t cn = cb.code_numel();
    Tensor<S> class_codes({M, cb.codes.dim(2), cb.codes.dim(3), cb.codes.dim(4)});
    for (int c = 0; c < C; ++c) {
      class_codes.vec() = cb.codes.vec().segment(static_cast<std::int64_t>(c) * M * cn, M * cn);
      typename Tensor<S>::VectorX mean = Tensor<S>::VectorX::Zero(E);
      for (int d = 0; d < D; ++d) {
        Tensor<S> emb = g.embed_value(
            standardize(decode_value(bank.decoders[static_cast<std::size_t>(d)], class_codes), stats));
        mean += emb.mat(M, E).colwise().sum().transpose();
      }
      mean /= static_cast<S>(D) * static_cast<S>(M);
      residuals_.vec().segment(static_cast<std::int64_t>(c) * E, E) =
          real_means.vec().segment(static_cast<std::int64_t>(c) * E, E) - mean;
      loss_ += S(0.5) * residuals_.vec().segment(static_cast<std::int64_t>(c) * E, E).squaredNorm();
    }
    loss_ /= static_cast<S>(C);
    seen_.assign(static_cast<std::size_t>(C) * M * D, false);
    total_ = ModelGrads<S>::zeros_like(cb, bank);
  }

  S loss() const { return loss_; }

  // partial gradient of the exact full-batch loss through one chunk
  ModelGrads<S> chunk_gradient(std::span<const Triple> chunk) const {
    const int C = cb_->num_classes(), M = cb_->codes_per_class(), D = bank_->size();
    const int E = g_->embed_dim();
    Tape<S> t;
    BoundModel<S> bm = bind_model(t, *cb_, *bank_, true);
    Var<S> total;
    for (const Triple& tr : chunk) {
      if (tr.c < 0 || tr.c >= C || tr.m < 0 || tr.m >= M || tr.d < 0 || tr.d >= D)
        throw Error("chunked_gradient: triple (" + std::to_string(tr.c) + "," + std::to_string(tr.m) +
                    "," + std::to_string(tr.d) + ") out of range");
      Var<S> img = synthesize_one(t, bm, tr.c, tr.m, tr.d);
      Var<S> emb = g_->embed(t, channel_standardize(img, stats_->mean, stats_->stdev));
      Tensor<S> r({1, E});
      r.vec() = residuals_.vec().segment(static_cast<std::int64_t>(tr.c) * E, E);
      Var<S> term = dot(emb, t.constant(std::move(r)));
      total = total ? add(total, term) : term;
    }
    if (!total) return ModelGrads<S>::zeros_like(*cb_, *bank_);
    Var<S> surrogate = scale(total, S(-1) / (static_cast<S>(C) * static_cast<S>(D) * static_cast<S>(M)));
    t.backward(surrogate);
    return extract_grads(t, bm, *cb_, *bank_);
  }

  // accumulate a chunk toward the full gradient; chunks must not overlap
  void accumulate(std::span<const Triple> chunk) {
    const int M = cb_->codes_per_class(), D = bank_->size();
    for (const Triple& tr : chunk) {
      const std::size_t key =
          (static_cast<std::size_t>(tr.c) * static_cast<std::size_t>(M) + static_cast<std::size_t>(tr.m)) *
              static_cast<std::size_t>(D) +
          static_cast<std::size_t>(tr.d);
      if (key >= seen_.size() || tr.c < 0 || tr.m < 0 || tr.d < 0)
        throw Error("chunked_gradient: triple out of range");
      if (seen_[key])
        throw Error("chunked_gradient: triple (" + std::to_string(tr.c) + "," + std::to_string(tr.m) +
                    "," + std::to_string(tr.d) + ") appears in more than one chunk");
      seen_[key] = true;
    }
    total_.accumulate(chunk_gradient(chunk));
  }

  bool complete() const {
    for (bool s : seen_)
      if (!s) return false;
    return true;
  }

  const ModelGrads<S>& grads() const { return total_; }

  ModelGrads<S> take() {
    if (!complete())
      throw Error("chunked_gradient: accumulation does not cover every (c, m, d) triple");
    return std::move(total_);
  }

 private:
  const LatentCodebook<S>* cb_;
  const DecoderBank<S>* bank_;
  const FeatureNet<S>* g_;
  const ChannelStats<S>* stats_;
  Tensor<S> residuals_;  // C x E, real mean minus full synthetic mean
  S loss_ = 0;
  std::vector<bool> seen_;
  ModelGrads<S> total_;
};

template <typename S>
ModelGrads<S> chunked_gradient(const Tensor<S>& real_means, const LatentCodebook<S>& cb,
                               const DecoderBank<S>& bank, const FeatureNet<S>& g,
                               const ChannelStats<S>& stats, std::span<const Triple> chunk) {
  return ChunkedGradient<S>(real_means, cb, bank, g, stats).chunk_gradient(chunk);
}

}  // namespace kfs
