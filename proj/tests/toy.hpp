#pragma once

// Small random matching instances shared by the matching, diagnostics, and
// acceptance suites.

#include <vector>

#include "kfs/diagnostics.hpp"
#include "kfs/factorization.hpp"
#include "kfs/matching.hpp"
#include "test_util.hpp"

namespace kfs::test {

template <typename S>
struct Toy {
  std::vector<Tensor<S>> real_by_class;  // per class: N x ch x H x W in [0,1]
  Tensor<S> real_means;                  // C x E under g
  LatentCodebook<S> cb;
  DecoderBank<S> bank;
  FeatureNet<S> g;
  ChannelStats<S> stats;
};

template <typename S>
Toy<S> make_toy(int C, int N, int M, int D, int img_c, int img_hw, int g_width, std::uint64_t seed,
                DecoderKind kind = DecoderKind::kLowR) {
  Toy<S> toy;
  const DecoderSpec spec = decoder_spec_for(kind, img_c, img_hw, img_hw);
  toy.cb = make_codebook<S>(C, M, spec);
  toy.cb.codes = Tensor<S>::gaussian(toy.cb.codes.shape(), CounterRng(seed, "toy/codes"), S(0.5));
  toy.bank = make_decoder_bank<S>(spec, D, mix64(seed ^ fnv1a64("toy/bank")));
  FeatureNetConfig gcfg;
  gcfg.in_channels = img_c;
  gcfg.in_h = img_hw;
  gcfg.in_w = img_hw;
  gcfg.width = g_width;
  gcfg.depth = 3;
  gcfg.init_seed = mix64(seed ^ fnv1a64("toy/g"));
  toy.g = build_feature_net<S>(gcfg);
  toy.stats = ChannelStats<S>::identity(img_c);
  for (int c = 0; c < C; ++c)
    toy.real_by_class.push_back(
        rand01<S>({N, img_c, img_hw, img_hw}, mix64(seed ^ (0xabcdull + static_cast<std::uint64_t>(c)))));
  toy.real_means = class_means_from_batches(toy.real_by_class, toy.g, toy.stats);
  return toy;
}

// canonical parameter list matching ModelGrads::flatten() order
template <typename S>
std::vector<Tensor<S>*> model_params(LatentCodebook<S>& cb, DecoderBank<S>& bank) {
  std::vector<Tensor<S>*> ps;
  ps.push_back(&cb.codes);
  for (Decoder<S>& dec : bank.decoders)
    for (std::size_t l = 0; l < dec.w.size(); ++l) {
      ps.push_back(&dec.w[l]);
      ps.push_back(&dec.b[l]);
    }
  return ps;
}

}  // namespace kfs::test
