#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kfs/ops.hpp"
#include "kfs/rng.hpp"
#include "kfs/tape.hpp"
#include "kfs/tensor.hpp"

namespace kfs {

// Per-channel normalization applied to every image (real or synthesized)
// before it enters a feature extractor or classifier.
template <typename S>
struct ChannelStats {
  std::vector<S> mean, stdev;

  static ChannelStats identity(int channels) {
    return {std::vector<S>(static_cast<std::size_t>(channels), S(0)),
            std::vector<S>(static_cast<std::size_t>(channels), S(1))};
  }

  template <typename T>
  ChannelStats<T> cast() const {
    ChannelStats<T> o;
    o.mean.assign(mean.begin(), mean.end());
    o.stdev.assign(stdev.begin(), stdev.end());
    return o;
  }
};

inline std::uint64_t stats_digest(const ChannelStats<float>& s) {
  std::uint64_t h = fnv1a64("channel-stats");
  auto mixf = [&h](float v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    __builtin_memcpy(&bits, &v, sizeof(bits));
    h = mix64(h ^ bits);
  };
  for (float v : s.mean) mixf(v);
  for (float v : s.stdev) mixf(v);
  return h;
}

template <typename S>
struct ConvLayer {
  Tensor<S> w, b;
};

// ---- random feature extractor ----

struct FeatureNetConfig {
  int in_channels = 3;
  int in_h = 32;
  int in_w = 32;
  int width = 64;
  int depth = 3;
  std::uint64_t init_seed = 0;
};

// architecture digest; the seed is a separate cache-key component
inline std::uint64_t config_digest(const FeatureNetConfig& cfg) {
  std::uint64_t h = fnv1a64("feature-net");
  for (int v : {cfg.in_channels, cfg.in_h, cfg.in_w, cfg.width, cfg.depth})
    h = mix64(h ^ static_cast<std::uint64_t>(v));
  return h;
}

template <typename S>
Tensor<S> kaiming_conv(int co, int ci, int k, std::uint64_t seed, const std::string& stream) {
  CounterRng rng(seed, stream);
  const S sigma = std::sqrt(S(2) / static_cast<S>(ci * k * k));
  return Tensor<S>::gaussian({co, ci, k, k}, rng, sigma);
}

// Frozen convolutional embedder: depth blocks of
// [conv3x3 -> instance norm -> relu -> 2x2 average pool], then flatten.
// Reconstructible bit-exactly from (config, seed).
template <typename S>
class FeatureNet {
 public:
  FeatureNetConfig cfg;
  std::vector<ConvLayer<S>> layers;

  int embed_dim() const {
    const int f = 1 << cfg.depth;
    return cfg.width * (cfg.in_h / f) * (cfg.in_w / f);
  }

  // x: standardized N x C x H x W batch already on the tape
  Var<S> embed(Tape<S>& t, Var<S> x) const {
    Var<S> h = x;
    for (const ConvLayer<S>& l : layers) {
      Var<S> w = t.constant(l.w);
      Var<S> b = t.constant(l.b);
      h = avg_pool2d(relu(instance_norm(conv2d(h, w, b, 1, 1))));
    }
    return flatten(h);
  }

  // no-grad fast path used for embedding-mean precomputation
  Tensor<S> embed_value(const Tensor<S>& x) const {
    Tensor<S> h = x;
    for (const ConvLayer<S>& l : layers) {
      h = kernels::conv2d_fwd(h, l.w, l.b, 1, 1);
      h = kernels::instance_norm_fwd(h, S(1e-5));
      h.array() = h.array().max(S(0));
      h = kernels::avg_pool2d_fwd(h);
    }
    return h.reshaped({h.dim(0), static_cast<int>(h.size() / h.dim(0))});
  }
};

template <typename S>
FeatureNet<S> build_feature_net(const FeatureNetConfig& cfg) {
  const int f = 1 << cfg.depth;
  if (cfg.in_h % f != 0 || cfg.in_w % f != 0)
    throw Error("feature net: spatial dims " + std::to_string(cfg.in_h) + "x" +
                std::to_string(cfg.in_w) + " not divisible by " + std::to_string(f));
  if (cfg.width < 1 || cfg.depth < 1) throw Error("feature net: width and depth must be positive");
  FeatureNet<S> net;
  net.cfg = cfg;
  int ci = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    ConvLayer<S> layer;
    layer.w = kaiming_conv<S>(cfg.width, ci, 3, cfg.init_seed, "g/conv" + std::to_string(l) + "/w");
    layer.b = Tensor<S>({cfg.width});
    net.layers.push_back(std::move(layer));
    ci = cfg.width;
  }
  return net;
}

// ---- decoders ----

enum class DecoderKind { kLowR, kHighR };

inline const char* kind_name(DecoderKind k) { return k == DecoderKind::kLowR ? "low" : "high"; }

inline int upsample_factor(DecoderKind k) { return k == DecoderKind::kLowR ? 8 : 4; }

struct DecoderSpec {
  DecoderKind kind = DecoderKind::kLowR;
  int code_channels = 12;
  int code_h = 4;
  int code_w = 4;
  int out_channels = 3;
  int out_h = 32;
  int out_w = 32;
};

// transposed-conv channel path; all kernels 2x2, stride 2, sigmoid at the end
inline std::vector<std::pair<int, int>> layer_channels(const DecoderSpec& spec) {
  if (spec.kind == DecoderKind::kLowR)
    return {{12, 9}, {9, 6}, {6, spec.out_channels}};
  return {{12, 6}, {6, spec.out_channels}};
}

inline void validate(const DecoderSpec& spec) {
  const int f = upsample_factor(spec.kind);
  if (spec.code_channels != 12)
    throw Error("decoder: code channels must be 12, got " + std::to_string(spec.code_channels));
  if (spec.out_h != f * spec.code_h || spec.out_w != f * spec.code_w)
    throw Error("decoder: output " + std::to_string(spec.out_h) + "x" + std::to_string(spec.out_w) +
                " is not " + std::to_string(f) + "x the code spatial " + std::to_string(spec.code_h) +
                "x" + std::to_string(spec.code_w));
  if (spec.out_channels < 1) throw Error("decoder: output channels must be positive");
}

inline DecoderSpec decoder_spec_for(DecoderKind kind, int out_c, int out_h, int out_w) {
  const int f = upsample_factor(kind);
  if (out_h % f != 0 || out_w % f != 0)
    throw Error("decoder: image " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                " not divisible by upsample factor " + std::to_string(f));
  return DecoderSpec{kind, 12, out_h / f, out_w / f, out_c, out_h, out_w};
}

inline int param_count(const DecoderSpec& spec) {
  validate(spec);
  int total = 0;
  for (auto [ci, co] : layer_channels(spec)) total += ci * co * 4 + co;
  return total;
}

template <typename S>
struct Decoder {
  DecoderSpec spec;
  std::vector<Tensor<S>> w;  // per layer: Ci x Co x 2 x 2
  std::vector<Tensor<S>> b;
};

template <typename S>
Decoder<S> build_decoder(const DecoderSpec& spec, std::uint64_t init_seed) {
  validate(spec);
  Decoder<S> dec;
  dec.spec = spec;
  int l = 0;
  for (auto [ci, co] : layer_channels(spec)) {
    CounterRng rng(init_seed, "dec/convT" + std::to_string(l) + "/w");
    const S sigma = std::sqrt(S(2) / static_cast<S>(ci * 4));
    dec.w.push_back(Tensor<S>::gaussian({ci, co, 2, 2}, rng, sigma));
    dec.b.push_back(Tensor<S>({co}));
    ++l;
  }
  return dec;
}

template <typename S>
struct BoundDecoder {
  const Decoder<S>* dec = nullptr;
  std::vector<Var<S>> w, b;
};

template <typename S>
BoundDecoder<S> bind_decoder(Tape<S>& t, const Decoder<S>& dec, bool trainable) {
  BoundDecoder<S> bd;
  bd.dec = &dec;
  for (std::size_t l = 0; l < dec.w.size(); ++l) {
    Tensor<S> w = dec.w[l];
    Tensor<S> b = dec.b[l];
    w.requires_grad = trainable;
    b.requires_grad = trainable;
    bd.w.push_back(t.leaf(std::move(w)));
    bd.b.push_back(t.leaf(std::move(b)));
  }
  return bd;
}

// codes: M x 12 x h x w -> images M x out_c x H x W, entries in (0, 1)
template <typename S>
Var<S> decode(Tape<S>& t, const BoundDecoder<S>& bd, Var<S> codes) {
  (void)t;
  const DecoderSpec& spec = bd.dec->spec;
  const Tensor<S>& cv = codes.value();
  if (cv.rank() != 4 || cv.dim(1) != spec.code_channels || cv.dim(2) != spec.code_h ||
      cv.dim(3) != spec.code_w)
    throw Error("decode: code batch " + shape_str(cv.shape()) + " incompatible with decoder code shape " +
                std::to_string(spec.code_channels) + "x" + std::to_string(spec.code_h) + "x" +
                std::to_string(spec.code_w));
  Var<S> h = codes;
  for (std::size_t l = 0; l < bd.w.size(); ++l) h = conv_transpose2d(h, bd.w[l], bd.b[l], 2);
  return sigmoid(h);
}

template <typename S>
Tensor<S> decode_value(const Decoder<S>& dec, const Tensor<S>& codes) {
  Tensor<S> h = codes;
  for (std::size_t l = 0; l < dec.w.size(); ++l)
    h = kernels::conv_transpose2d_fwd(h, dec.w[l], dec.b[l], 2);
  Tensor<S> out(h.shape());
  out.array() = S(1) / (S(1) + (-h.array()).exp());
  return out;
}

// ---- pretraining encoder (mirror of the decoder; discarded after code init) ----

template <typename S>
struct Encoder {
  DecoderSpec spec;  // of the decoder it mirrors
  std::vector<ConvLayer<S>> layers;
};

template <typename S>
Encoder<S> build_encoder(const DecoderSpec& spec, std::uint64_t init_seed) {
  validate(spec);
  Encoder<S> enc;
  enc.spec = spec;
  auto path = layer_channels(spec);
  int l = 0;
  for (auto it = path.rbegin(); it != path.rend(); ++it, ++l) {
    ConvLayer<S> layer;
    layer.w = kaiming_conv<S>(it->first, it->second, 2, init_seed, "enc/conv" + std::to_string(l) + "/w");
    layer.b = Tensor<S>({it->first});
    enc.layers.push_back(std::move(layer));
  }
  return enc;
}

template <typename S>
struct BoundEncoder {
  const Encoder<S>* enc = nullptr;
  std::vector<Var<S>> w, b;
};

template <typename S>
BoundEncoder<S> bind_encoder(Tape<S>& t, const Encoder<S>& enc, bool trainable) {
  BoundEncoder<S> be;
  be.enc = &enc;
  for (const ConvLayer<S>& l : enc.layers) {
    Tensor<S> w = l.w;
    Tensor<S> b = l.b;
    w.requires_grad = trainable;
    b.requires_grad = trainable;
    be.w.push_back(t.leaf(std::move(w)));
    be.b.push_back(t.leaf(std::move(b)));
  }
  return be;
}

template <typename S>
Var<S> encode(Tape<S>& t, const BoundEncoder<S>& be, Var<S> images) {
  (void)t;
  Var<S> h = images;
  for (std::size_t l = 0; l < be.w.size(); ++l) h = conv2d(h, be.w[l], be.b[l], 2, 0);
  return h;
}

template <typename S>
Tensor<S> encode_value(const Encoder<S>& enc, const Tensor<S>& images) {
  Tensor<S> h = images;
  for (const ConvLayer<S>& l : enc.layers) h = kernels::conv2d_fwd(h, l.w, l.b, 2, 0);
  return h;
}

// ---- evaluation classifier ----

struct ClassifierConfig {
  FeatureNetConfig backbone;
  int num_classes = 10;
};

template <typename S>
struct Classifier {
  ClassifierConfig cfg;
  std::vector<ConvLayer<S>> blocks;
  Tensor<S> head_w, head_b;

  std::vector<Tensor<S>*> params() {
    std::vector<Tensor<S>*> ps;
    for (ConvLayer<S>& l : blocks) {
      ps.push_back(&l.w);
      ps.push_back(&l.b);
    }
    ps.push_back(&head_w);
    ps.push_back(&head_b);
    return ps;
  }
};

template <typename S>
Classifier<S> build_classifier(const ClassifierConfig& cfg) {
  if (cfg.num_classes < 2) throw Error("classifier: need at least 2 classes");
  const FeatureNetConfig& bb = cfg.backbone;
  const int f = 1 << bb.depth;
  if (bb.in_h % f != 0 || bb.in_w % f != 0)
    throw Error("classifier: spatial dims not divisible by " + std::to_string(f));
  Classifier<S> clf;
  clf.cfg = cfg;
  int ci = bb.in_channels;
  for (int l = 0; l < bb.depth; ++l) {
    ConvLayer<S> layer;
    layer.w = kaiming_conv<S>(bb.width, ci, 3, bb.init_seed, "clf/conv" + std::to_string(l) + "/w");
    layer.b = Tensor<S>({bb.width});
    clf.blocks.push_back(std::move(layer));
    ci = bb.width;
  }
  const int embed = bb.width * (bb.in_h / f) * (bb.in_w / f);
  CounterRng rng(bb.init_seed, "clf/head/w");
  clf.head_w = Tensor<S>::gaussian({cfg.num_classes, embed}, rng, std::sqrt(S(2) / static_cast<S>(embed)));
  clf.head_b = Tensor<S>({cfg.num_classes});
  return clf;
}

template <typename S>
struct BoundClassifier {
  const Classifier<S>* clf = nullptr;
  std::vector<Var<S>> w, b;
  Var<S> head_w, head_b;
};

template <typename S>
BoundClassifier<S> bind_classifier(Tape<S>& t, const Classifier<S>& clf, bool trainable) {
  BoundClassifier<S> bc;
  bc.clf = &clf;
  for (const ConvLayer<S>& l : clf.blocks) {
    Tensor<S> w = l.w;
    Tensor<S> b = l.b;
    w.requires_grad = trainable;
    b.requires_grad = trainable;
    bc.w.push_back(t.leaf(std::move(w)));
    bc.b.push_back(t.leaf(std::move(b)));
  }
  Tensor<S> hw = clf.head_w;
  Tensor<S> hb = clf.head_b;
  hw.requires_grad = trainable;
  hb.requires_grad = trainable;
  bc.head_w = t.leaf(std::move(hw));
  bc.head_b = t.leaf(std::move(hb));
  return bc;
}

template <typename S>
Var<S> logits(Tape<S>& t, const BoundClassifier<S>& bc, Var<S> x) {
  (void)t;
  Var<S> h = x;
  for (std::size_t l = 0; l < bc.w.size(); ++l)
    h = avg_pool2d(relu(instance_norm(conv2d(h, bc.w[l], bc.b[l], 1, 1))));
  return linear(flatten(h), bc.head_w, bc.head_b);
}

template <typename S>
Tensor<S> logits_value(const Classifier<S>& clf, const Tensor<S>& x) {
  Tensor<S> h = x;
  for (const ConvLayer<S>& l : clf.blocks) {
    h = kernels::conv2d_fwd(h, l.w, l.b, 1, 1);
    h = kernels::instance_norm_fwd(h, S(1e-5));
    h.array() = h.array().max(S(0));
    h = kernels::avg_pool2d_fwd(h);
  }
  h = h.reshaped({h.dim(0), static_cast<int>(h.size() / h.dim(0))});
  return kernels::linear_fwd(h, clf.head_w, clf.head_b);
}

}  // namespace kfs
