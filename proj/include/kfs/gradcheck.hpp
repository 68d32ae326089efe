#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kfs/matching.hpp"

// Self-contained finite-difference audit of every differentiable primitive
// and of the end-to-end matching loss, in f64. Used by the `gradcheck` CLI.

namespace kfs {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0;
  bool pass = false;
};

namespace gradcheck_detail {

using Builder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

inline double check_one(std::vector<Tensor<double>> inputs, const Builder& build, double h) {
  Tensor<double> contraction;
  auto loss_value = [&]() -> double {
    Tape<double> t;
    std::vector<Var<double>> vars;
    for (Tensor<double>& in : inputs) vars.push_back(t.constant(in));
    Var<double> out = build(t, vars);
    if (contraction.size() == 0)
      contraction = Tensor<double>::gaussian(out.value().shape(), CounterRng(4242, "gradcheck"));
    return dot(out, t.constant(contraction)).value().item();
  };
  loss_value();

  Tape<double> t;
  std::vector<Var<double>> vars;
  for (Tensor<double>& in : inputs) {
    in.requires_grad = true;
    vars.push_back(t.leaf(in));
  }
  t.backward(dot(build(t, vars), t.constant(contraction)));

  // two passes: the first finds the gradient scale, the second normalizes
  // small-coordinate roundoff against it instead of against itself
  std::vector<Tensor<double>> got, fd;
  double scale = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    got.push_back(t.grad(vars[i].id));
    Tensor<double> g(inputs[i].shape());
    for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + h;
      const double fp = loss_value();
      inputs[i][j] = orig - h;
      const double fm = loss_value();
      inputs[i][j] = orig;
      g[j] = (fp - fm) / (2 * h);
      scale = std::max({scale, std::abs(g[j]), std::abs(got[i][j])});
    }
    fd.push_back(std::move(g));
  }
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
      const double diff = std::abs(got[i][j] - fd[i][j]);
      worst = std::max(worst, diff / std::max({std::abs(got[i][j]), std::abs(fd[i][j]), scale * 1e-3,
                                               1e-300}));
    }
  return worst;
}

inline Tensor<double> gauss(Shape shape, std::uint64_t seed, double sigma = 1.0) {
  return Tensor<double>::gaussian(std::move(shape), CounterRng(seed, "gc"), sigma);
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckRow> run_gradcheck(double tol = 1e-6) {
  using namespace gradcheck_detail;
  std::vector<GradCheckRow> rows;
  auto emit = [&rows, tol](const std::string& name, double err) {
    rows.push_back({name, err, err < tol});
  };

  emit("conv2d", check_one({gauss({2, 3, 6, 6}, 1), gauss({4, 3, 3, 3}, 2), gauss({4}, 3)},
                          [](Tape<double>&, std::vector<Var<double>>& v) {
                            return conv2d(v[0], v[1], v[2], 1, 1);
                          },
                          1e-5));
  emit("conv_transpose2d",
      check_one({gauss({2, 3, 3, 3}, 4), gauss({3, 2, 2, 2}, 5), gauss({2}, 6)},
                [](Tape<double>&, std::vector<Var<double>>& v) {
                  return conv_transpose2d(v[0], v[1], v[2], 2);
                },
                1e-5));
  {
    Tensor<double> away = gauss({3, 7}, 7);
    for (std::int64_t i = 0; i < away.size(); ++i) away[i] += away[i] >= 0 ? 0.05 : -0.05;
    emit("relu", check_one({away},
                          [](Tape<double>&, std::vector<Var<double>>& v) { return relu(v[0]); },
                          1e-5));
  }
  emit("sigmoid", check_one({gauss({3, 7}, 8)},
                           [](Tape<double>&, std::vector<Var<double>>& v) { return sigmoid(v[0]); },
                           1e-5));
  emit("avg_pool2d",
      check_one({gauss({2, 3, 4, 4}, 9)},
                [](Tape<double>&, std::vector<Var<double>>& v) { return avg_pool2d(v[0]); }, 1e-5));
  emit("instance_norm",
      check_one({gauss({2, 2, 4, 4}, 10)},
                [](Tape<double>&, std::vector<Var<double>>& v) { return instance_norm(v[0]); },
                1e-5));
  emit("flatten+reshape",
      check_one({gauss({2, 3, 2, 2}, 11)},
                [](Tape<double>&, std::vector<Var<double>>& v) {
                  return reshape(flatten(v[0]), {3, 8});
                },
                1e-5));
  emit("mean_all", check_one({gauss({4, 5}, 12)},
                            [](Tape<double>&, std::vector<Var<double>>& v) { return mean_all(v[0]); },
                            1e-5));
  emit("sum_all", check_one({gauss({4, 5}, 13)},
                           [](Tape<double>&, std::vector<Var<double>>& v) { return sum_all(v[0]); },
                           1e-5));
  emit("mean_rows",
      check_one({gauss({6, 4}, 14)},
                [](Tape<double>&, std::vector<Var<double>>& v) { return mean_rows(v[0]); }, 1e-5));
  emit("add/sub/mul/scale",
      check_one({gauss({3, 4}, 15), gauss({3, 4}, 16)},
                [](Tape<double>&, std::vector<Var<double>>& v) {
                  return scale(mul(add(v[0], v[1]), sub(v[0], v[1])), 0.7);
                },
                1e-5));
  emit("dot", check_one({gauss({9}, 17), gauss({9}, 18)},
                       [](Tape<double>&, std::vector<Var<double>>& v) { return dot(v[0], v[1]); },
                       1e-5));
  emit("slice0", check_one({gauss({4, 3, 2}, 19)},
                          [](Tape<double>&, std::vector<Var<double>>& v) { return slice0(v[0], 1); },
                          1e-5));
  emit("linear",
      check_one({gauss({4, 5}, 20), gauss({3, 5}, 21), gauss({3}, 22)},
                [](Tape<double>&, std::vector<Var<double>>& v) { return linear(v[0], v[1], v[2]); },
                1e-5));
  emit("cross_entropy",
      check_one({gauss({4, 3}, 23)},
                [](Tape<double>&, std::vector<Var<double>>& v) {
                  return cross_entropy(v[0], std::vector<int>{0, 2, 1, 1});
                },
                1e-5));
  emit("channel_standardize",
      check_one({gauss({2, 2, 3, 3}, 24)},
                [](Tape<double>&, std::vector<Var<double>>& v) {
                  return channel_standardize(v[0], std::vector<double>{0.3, -0.2},
                                             std::vector<double>{0.9, 1.2});
                },
                1e-5));

  // end-to-end matching loss on a toy instance
  {
    const DecoderSpec spec = decoder_spec_for(DecoderKind::kLowR, 3, 8, 8);
    LatentCodebook<double> cb = make_codebook<double>(2, 2, spec);
    cb.codes = gauss(cb.codes.shape(), 31, 0.5);
    DecoderBank<double> bank = make_decoder_bank<double>(spec, 2, 32);
    FeatureNetConfig gcfg;
    gcfg.in_channels = 3;
    gcfg.in_h = gcfg.in_w = 8;
    gcfg.width = 8;
    gcfg.depth = 3;
    gcfg.init_seed = 33;
    FeatureNet<double> g = build_feature_net<double>(gcfg);
    ChannelStats<double> stats = ChannelStats<double>::identity(3);
    Tensor<double> means = gauss({2, g.embed_dim()}, 34, 0.3);

    auto [loss, grads] = full_gradient(means, cb, bank, g, stats);
    (void)loss;
    const Eigen::VectorXd got = grads.flatten();

    std::vector<Tensor<double>*> params;
    params.push_back(&cb.codes);
    for (Decoder<double>& dec : bank.decoders)
      for (std::size_t l = 0; l < dec.w.size(); ++l) {
        params.push_back(&dec.w[l]);
        params.push_back(&dec.b[l]);
      }
    Eigen::VectorXd fd(got.size());
    std::int64_t at = 0;
    const double h = 1e-5;
    for (Tensor<double>* p : params) {
      for (std::int64_t j = 0; j < p->size(); ++j, ++at) {
        const double orig = (*p)[j];
        (*p)[j] = orig + h;
        const double fp = mmd_loss(means, cb, bank, g, stats);
        (*p)[j] = orig - h;
        const double fm = mmd_loss(means, cb, bank, g, stats);
        (*p)[j] = orig;
        fd[at] = (fp - fm) / (2 * h);
      }
    }
    const double scale = std::max(fd.cwiseAbs().maxCoeff(), got.cwiseAbs().maxCoeff());
    double worst = 0;
    for (at = 0; at < fd.size(); ++at) {
      const double diff = std::abs(got[at] - fd[at]);
      worst = std::max(worst, diff / std::max({std::abs(got[at]), std::abs(fd[at]), scale * 1e-3,
                                               1e-300}));
    }
    emit("end_to_end_matching_loss", worst);
  }
  return rows;
}

}  // namespace kfs
