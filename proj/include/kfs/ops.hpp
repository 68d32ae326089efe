#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kfs/tape.hpp"
#include "kfs/tensor.hpp"

// Differentiable primitives. Each op has a plain forward kernel (also used
// by no-grad paths such as embedding-mean precomputation) and a tape
// recording that wires up the reverse pass. Only the operations the
// architectures and losses actually need are implemented; there is no
// general broadcasting.

namespace kfs {

namespace kernels {

template <typename S>
void check_nchw(const Tensor<S>& x, const char* op) {
  if (x.rank() != 4) throw Error(std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

// cols is (Ci*k*k) x (Ho*Wo); zero-padded reads outside the input plane
template <typename S>
void im2col(const S* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, S* cols) {
  const int L = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int p = 0; p < k; ++p) {
      for (int q = 0; q < k; ++q) {
        S* row = cols + (static_cast<std::int64_t>(c) * k * k + p * k + q) * L;
        for (int y = 0; y < ho; ++y) {
          const int iy = y * stride - pad + p;
          if (iy < 0 || iy >= h) {
            std::fill(row + y * wo, row + (y + 1) * wo, S(0));
            continue;
          }
          const S* src = x + (static_cast<std::int64_t>(c) * h + iy) * w;
          for (int xo = 0; xo < wo; ++xo) {
            const int ix = xo * stride - pad + q;
            row[y * wo + xo] = (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accum(const S* cols, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, S* x) {
  const int L = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int p = 0; p < k; ++p) {
      for (int q = 0; q < k; ++q) {
        const S* row = cols + (static_cast<std::int64_t>(c) * k * k + p * k + q) * L;
        for (int y = 0; y < ho; ++y) {
          const int iy = y * stride - pad + p;
          if (iy < 0 || iy >= h) continue;
          S* dst = x + (static_cast<std::int64_t>(c) * h + iy) * w;
          for (int xo = 0; xo < wo; ++xo) {
            const int ix = xo * stride - pad + q;
            if (ix >= 0 && ix < w) dst[ix] += row[y * wo + xo];
          }
        }
      }
    }
  }
}

template <typename S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int pad) {
  check_nchw(x, "conv2d");
  if (w.rank() != 4) throw Error("conv2d: expected OIkk weight, got " + shape_str(w.shape()));
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci)
    throw Error("conv2d: weight in-channels " + std::to_string(w.dim(1)) +
                " do not match input channels " + std::to_string(ci));
  if (w.dim(3) != k) throw Error("conv2d: non-square kernel " + shape_str(w.shape()));
  if (b.size() != co)
    throw Error("conv2d: bias length " + std::to_string(b.size()) + " does not match out-channels " +
                std::to_string(co));
  if (k > h + 2 * pad || k > ww + 2 * pad)
    throw Error("conv2d: kernel " + std::to_string(k) + " exceeds padded input " +
                std::to_string(h + 2 * pad) + "x" + std::to_string(ww + 2 * pad));
  if (stride < 1) throw Error("conv2d: stride must be positive");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (ww + 2 * pad - k) / stride + 1;
  const int K = ci * k * k, L = ho * wo;

  Tensor<S> out({n, co, ho, wo});
  Tensor<S> cols({K, L});
  auto wm = w.mat(co, K);
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + static_cast<std::int64_t>(i) * ci * h * ww, ci, h, ww, k, stride, pad, ho, wo,
           cols.data());
    Eigen::Map<typename Tensor<S>::MatrixR> om(out.data() + static_cast<std::int64_t>(i) * co * L, co, L);
    om.noalias() = wm * cols.mat(K, L);
    for (int c = 0; c < co; ++c) om.row(c).array() += b[c];
  }
  return out;
}

// k == stride is the only supported configuration; output blocks are then
// disjoint and each output cell is written exactly once.
template <typename S>
Tensor<S> conv_transpose2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride) {
  check_nchw(x, "conv_transpose2d");
  if (w.rank() != 4) throw Error("conv_transpose2d: expected IOkk weight, got " + shape_str(w.shape()));
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int co = w.dim(1), k = w.dim(2);
  if (k != stride)
    throw Error("conv_transpose2d: unsupported configuration kernel " + std::to_string(k) +
                " != stride " + std::to_string(stride));
  if (w.dim(0) != ci)
    throw Error("conv_transpose2d: weight in-channels " + std::to_string(w.dim(0)) +
                " do not match input channels " + std::to_string(ci));
  if (w.dim(3) != k) throw Error("conv_transpose2d: non-square kernel " + shape_str(w.shape()));
  if (b.size() != co)
    throw Error("conv_transpose2d: bias length " + std::to_string(b.size()) +
                " does not match out-channels " + std::to_string(co));
  const int ho = h * stride, wo = ww * stride;
  const int Kc = co * k * k, L = h * ww;

  Tensor<S> out({n, co, ho, wo});
  Tensor<S> m({Kc, L});
  auto wm = w.mat(ci, Kc);
  for (int i = 0; i < n; ++i) {
    auto xm = Eigen::Map<const typename Tensor<S>::MatrixR>(
        x.data() + static_cast<std::int64_t>(i) * ci * h * ww, ci, L);
    m.mat(Kc, L).noalias() = wm.transpose() * xm;
    S* o = out.data() + static_cast<std::int64_t>(i) * co * ho * wo;
    for (int c = 0; c < co; ++c) {
      for (int p = 0; p < k; ++p) {
        for (int q = 0; q < k; ++q) {
          const S* src = m.data() + (static_cast<std::int64_t>(c) * k * k + p * k + q) * L;
          for (int y = 0; y < h; ++y) {
            S* dst = o + (static_cast<std::int64_t>(c) * ho + y * stride + p) * wo + q;
            const S* s = src + y * ww;
            for (int xo = 0; xo < ww; ++xo) dst[xo * stride] = s[xo] + b[c];
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> avg_pool2d_fwd(const Tensor<S>& x) {
  check_nchw(x, "avg_pool2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw Error("avg_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                " not divisible by 2");
  Tensor<S> out({n, c, h / 2, w / 2});
  const S* xp = x.data();
  S* op = out.data();
  const std::int64_t planes = static_cast<std::int64_t>(n) * c;
  for (std::int64_t p = 0; p < planes; ++p) {
    const S* xi = xp + p * h * w;
    S* oi = op + p * (h / 2) * (w / 2);
    for (int y = 0; y < h / 2; ++y)
      for (int xo = 0; xo < w / 2; ++xo) {
        const S* r0 = xi + (2 * y) * w + 2 * xo;
        const S* r1 = r0 + w;
        oi[y * (w / 2) + xo] = (r0[0] + r0[1] + r1[0] + r1[1]) * S(0.25);
      }
  }
  return out;
}

// Normalizes every (sample, channel) plane to zero mean / unit variance.
// No learned affine.
template <typename S>
Tensor<S> instance_norm_fwd(const Tensor<S>& x, S eps) {
  check_nchw(x, "instance_norm");
  const int h = x.dim(2), w = x.dim(3);
  const std::int64_t area = static_cast<std::int64_t>(h) * w;
  if (area == 0) throw Error("instance_norm: zero-area plane " + shape_str(x.shape()));
  const std::int64_t planes = static_cast<std::int64_t>(x.dim(0)) * x.dim(1);
  Tensor<S> out(x.shape());
  for (std::int64_t p = 0; p < planes; ++p) {
    Eigen::Map<const typename Tensor<S>::ArrayX> xi(x.data() + p * area, area);
    Eigen::Map<typename Tensor<S>::ArrayX> oi(out.data() + p * area, area);
    const S mu = xi.mean();
    const S var = (xi - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    oi = (xi - mu) * inv;
  }
  return out;
}

template <typename S>
Tensor<S> linear_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw Error("linear: expected 2-d input and weight, got " + shape_str(x.shape()) + " and " +
                shape_str(w.shape()));
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in)
    throw Error("linear: weight in-dim " + std::to_string(w.dim(1)) + " does not match input dim " +
                std::to_string(in));
  if (b.size() != out_dim) throw Error("linear: bias length mismatch");
  Tensor<S> out({n, out_dim});
  out.mat(n, out_dim).noalias() = x.mat(n, in) * w.mat(out_dim, in).transpose();
  out.mat(n, out_dim).rowwise() += b.vec().transpose();
  return out;
}

}  // namespace kernels

namespace detail {

template <typename S>
void same_tape(Var<S> a, Var<S> b, const char* op) {
  if (a.tape != b.tape) throw Error(std::string(op) + ": operands recorded on different tapes");
}

template <typename S>
void same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(x.value().shape());
  out.array() = x.value().array().max(S(0));
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid](Tape<S>& tp, int self) {
    tp.adjoint(xid).array() +=
        (tp.value(xid).array() > S(0)).template cast<S>() * tp.adjoint_ref(self).array();
  }));
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(x.value().shape());
  out.array() = S(1) / (S(1) + (-x.value().array()).exp());
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid](Tape<S>& tp, int self) {
    auto y = tp.value(self).array();
    tp.adjoint(xid).array() += y * (S(1) - y) * tp.adjoint_ref(self).array();
  }));
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "add");
  detail::same_shape(a.value(), b.value(), "add");
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.value().shape());
  out.array() = a.value().array() + b.value().array();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [aid, bid](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint(self);
    if (tp.needs_grad(aid)) tp.adjoint(aid).array() += g.array();
    if (tp.needs_grad(bid)) tp.adjoint(bid).array() += g.array();
  }));
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "sub");
  detail::same_shape(a.value(), b.value(), "sub");
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.value().shape());
  out.array() = a.value().array() - b.value().array();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [aid, bid](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint(self);
    if (tp.needs_grad(aid)) tp.adjoint(aid).array() += g.array();
    if (tp.needs_grad(bid)) tp.adjoint(bid).array() -= g.array();
  }));
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "mul");
  detail::same_shape(a.value(), b.value(), "mul");
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.value().shape());
  out.array() = a.value().array() * b.value().array();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [aid, bid](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint(self);
    if (tp.needs_grad(aid)) tp.adjoint(aid).array() += g.array() * tp.value(bid).array();
    if (tp.needs_grad(bid)) tp.adjoint(bid).array() += g.array() * tp.value(aid).array();
  }));
}

template <typename S>
Var<S> scale(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(x.value().shape());
  out.array() = x.value().array() * c;
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid, c](Tape<S>& tp, int self) {
    tp.adjoint(xid).array() += tp.adjoint_ref(self).array() * c;
  }));
}

// per-channel (x - mean[c]) / std[c] on NCHW; constants, differentiable in x
template <typename S>
Var<S> channel_standardize(Var<S> x, std::vector<S> mean, std::vector<S> stdev) {
  kernels::check_nchw(x.value(), "channel_standardize");
  const int n = x.value().dim(0), c = x.value().dim(1);
  const std::int64_t area = static_cast<std::int64_t>(x.value().dim(2)) * x.value().dim(3);
  if (static_cast<int>(mean.size()) != c || static_cast<int>(stdev.size()) != c)
    throw Error("channel_standardize: stats length does not match channel count " + std::to_string(c));
  Tape<S>& t = *x.tape;
  Tensor<S> out(x.value().shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t off = (static_cast<std::int64_t>(i) * c + ch) * area;
      Eigen::Map<const typename Tensor<S>::ArrayX> xi(x.value().data() + off, area);
      Eigen::Map<typename Tensor<S>::ArrayX> oi(out.data() + off, area);
      oi = (xi - mean[static_cast<std::size_t>(ch)]) / stdev[static_cast<std::size_t>(ch)];
    }
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng,
                       !ng ? typename Tape<S>::BackFn{}
                           : [xid, c, area, stdev](Tape<S>& tp, int self) {
                               const Tensor<S>& g = tp.adjoint_ref(self);
                               Tensor<S>& gx = tp.adjoint(xid);
                               const int n2 = tp.value(xid).dim(0);
                               for (int i = 0; i < n2; ++i)
                                 for (int ch = 0; ch < c; ++ch) {
                                   const std::int64_t off = (static_cast<std::int64_t>(i) * c + ch) * area;
                                   Eigen::Map<typename Tensor<S>::ArrayX> go(gx.data() + off, area);
                                   Eigen::Map<const typename Tensor<S>::ArrayX> gi(g.data() + off, area);
                                   go += gi / stdev[static_cast<std::size_t>(ch)];
                                 }
                             }));
}

// ---- reductions ----

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = Tensor<S>::scalar(x.value().array().sum());
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid](Tape<S>& tp, int self) {
    tp.adjoint(xid).array() += tp.adjoint_ref(self).item();
  }));
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  if (x.value().size() == 0) throw Error("mean_all: empty tensor");
  Tape<S>& t = *x.tape;
  const S inv = S(1) / static_cast<S>(x.value().size());
  Tensor<S> out = Tensor<S>::scalar(x.value().array().sum() * inv);
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid, inv](Tape<S>& tp, int self) {
    tp.adjoint(xid).array() += tp.adjoint_ref(self).item() * inv;
  }));
}

// mean over the leading axis: [d0, rest...] -> [rest...]
template <typename S>
Var<S> mean_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() < 1 || xv.dim(0) == 0)
    throw Error("mean_rows: need a non-empty leading axis, got " + shape_str(xv.shape()));
  const int d0 = xv.dim(0);
  const std::int64_t rest = xv.size() / d0;
  Shape oshape(xv.shape().begin() + 1, xv.shape().end());
  Tensor<S> out(oshape);
  out.vec() = xv.mat(d0, rest).colwise().mean().transpose();
  Tape<S>& t = *x.tape;
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  const S inv = S(1) / static_cast<S>(d0);
  return t.wrap(t.push(std::move(out), ng,
                       !ng ? typename Tape<S>::BackFn{}
                           : [xid, d0, rest, inv](Tape<S>& tp, int self) {
                               tp.adjoint(xid).mat(d0, rest).rowwise() +=
                                   inv * tp.adjoint_ref(self).vec().transpose();
                             }));
}

template <typename S>
Var<S> dot(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "dot");
  detail::same_shape(a.value(), b.value(), "dot");
  Tape<S>& t = *a.tape;
  Tensor<S> out = Tensor<S>::scalar(a.value().vec().dot(b.value().vec()));
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [aid, bid](Tape<S>& tp, int self) {
    const S g = tp.adjoint_ref(self).item();
    if (tp.needs_grad(aid)) tp.adjoint(aid).array() += g * tp.value(bid).array();
    if (tp.needs_grad(bid)) tp.adjoint(bid).array() += g * tp.value(aid).array();
  }));
}

// ---- shape ----

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = x.value().reshaped(std::move(shape));
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid](Tape<S>& tp, int self) {
    tp.adjoint(xid).array() += tp.adjoint_ref(self).array();
  }));
}

template <typename S>
Var<S> flatten(Var<S> x) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() < 1) throw Error("flatten: rank-0 input");
  const int n = xv.dim(0);
  return reshape(x, Shape{n, static_cast<int>(xv.size() / std::max(n, 1))});
}

// slice along the leading axis: [d0, rest...] -> [rest...]
template <typename S>
Var<S> slice0(Var<S> x, int i) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() < 1) throw Error("slice0: rank-0 input");
  const int d0 = xv.dim(0);
  if (i < 0 || i >= d0)
    throw Error("slice0: index " + std::to_string(i) + " out of range for extent " + std::to_string(d0));
  const std::int64_t rest = xv.size() / d0;
  Shape oshape(xv.shape().begin() + 1, xv.shape().end());
  Tensor<S> out(oshape);
  out.vec() = xv.vec().segment(static_cast<std::int64_t>(i) * rest, rest);
  Tape<S>& t = *x.tape;
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng,
                       !ng ? typename Tape<S>::BackFn{}
                           : [xid, i, rest](Tape<S>& tp, int self) {
                               tp.adjoint(xid).vec().segment(static_cast<std::int64_t>(i) * rest, rest) +=
                                   tp.adjoint_ref(self).vec();
                             }));
}

// ---- structured ops ----

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int padding) {
  detail::same_tape(x, w, "conv2d");
  detail::same_tape(x, b, "conv2d");
  Tape<S>& t = *x.tape;
  Tensor<S> out = kernels::conv2d_fwd(x.value(), w.value(), b.value(), stride, padding);
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  const int xid = x.id, wid = w.id, bid = b.id;
  return t.wrap(t.push(
      std::move(out), ng,
      !ng ? typename Tape<S>::BackFn{} : [xid, wid, bid, stride, padding](Tape<S>& tp, int self) {
        const Tensor<S>& g = tp.adjoint_ref(self);
        const Tensor<S>& xv = tp.value(xid);
        const Tensor<S>& wv = tp.value(wid);
        const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
        const int co = wv.dim(0), k = wv.dim(2);
        const int ho = g.dim(2), wo = g.dim(3);
        const int K = ci * k * k, L = ho * wo;
        auto wm = wv.mat(co, K);
        const bool need_x = tp.needs_grad(xid), need_w = tp.needs_grad(wid), need_b = tp.needs_grad(bid);
        Tensor<S> cols({K, L}), dcols({K, L});
        for (int i = 0; i < n; ++i) {
          auto gm = Eigen::Map<const typename Tensor<S>::MatrixR>(
              g.data() + static_cast<std::int64_t>(i) * co * L, co, L);
          if (need_w || need_x)
            kernels::im2col(xv.data() + static_cast<std::int64_t>(i) * ci * h * ww, ci, h, ww, k,
                            stride, padding, ho, wo, cols.data());
          if (need_w) tp.adjoint(wid).mat(co, K).noalias() += gm * cols.mat(K, L).transpose();
          if (need_b) tp.adjoint(bid).vec().noalias() += gm.rowwise().sum();
          if (need_x) {
            dcols.mat(K, L).noalias() = wm.transpose() * gm;
            kernels::col2im_accum(dcols.data(), ci, h, ww, k, stride, padding, ho, wo,
                                  tp.adjoint(xid).data() + static_cast<std::int64_t>(i) * ci * h * ww);
          }
        }
      }));
}

template <typename S>
Var<S> conv_transpose2d(Var<S> x, Var<S> w, Var<S> b, int stride) {
  detail::same_tape(x, w, "conv_transpose2d");
  detail::same_tape(x, b, "conv_transpose2d");
  Tape<S>& t = *x.tape;
  Tensor<S> out = kernels::conv_transpose2d_fwd(x.value(), w.value(), b.value(), stride);
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  const int xid = x.id, wid = w.id, bid = b.id;
  return t.wrap(t.push(
      std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid, wid, bid, stride](Tape<S>& tp, int self) {
        const Tensor<S>& g = tp.adjoint_ref(self);
        const Tensor<S>& xv = tp.value(xid);
        const Tensor<S>& wv = tp.value(wid);
        const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
        const int co = wv.dim(1), k = stride;
        const int ho = g.dim(2), wo = g.dim(3);
        const int Kc = co * k * k, L = h * ww;
        auto wm = wv.mat(ci, Kc);
        const bool need_x = tp.needs_grad(xid), need_w = tp.needs_grad(wid), need_b = tp.needs_grad(bid);
        Tensor<S> gmat({Kc, L});
        for (int i = 0; i < n; ++i) {
          const S* gp = g.data() + static_cast<std::int64_t>(i) * co * ho * wo;
          for (int c = 0; c < co; ++c)
            for (int p = 0; p < k; ++p)
              for (int q = 0; q < k; ++q) {
                S* dst = gmat.data() + (static_cast<std::int64_t>(c) * k * k + p * k + q) * L;
                for (int y = 0; y < h; ++y) {
                  const S* src = gp + (static_cast<std::int64_t>(c) * ho + y * stride + p) * wo + q;
                  for (int xo = 0; xo < ww; ++xo) dst[y * ww + xo] = src[xo * stride];
                }
              }
          if (need_x) {
            Eigen::Map<typename Tensor<S>::MatrixR> dx(
                tp.adjoint(xid).data() + static_cast<std::int64_t>(i) * ci * L, ci, L);
            dx.noalias() += wm * gmat.mat(Kc, L);
          }
          if (need_w) {
            auto xm = Eigen::Map<const typename Tensor<S>::MatrixR>(
                xv.data() + static_cast<std::int64_t>(i) * ci * L, ci, L);
            tp.adjoint(wid).mat(ci, Kc).noalias() += xm * gmat.mat(Kc, L).transpose();
          }
          if (need_b) {
            auto gm = Eigen::Map<const typename Tensor<S>::MatrixR>(gp, co,
                                                                    static_cast<std::int64_t>(ho) * wo);
            tp.adjoint(bid).vec().noalias() += gm.rowwise().sum();
          }
        }
      }));
}

template <typename S>
Var<S> avg_pool2d(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = kernels::avg_pool2d_fwd(x.value());
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint_ref(self);
    Tensor<S>& gx = tp.adjoint(xid);
    const int h = tp.value(xid).dim(2), w = tp.value(xid).dim(3);
    const std::int64_t planes = static_cast<std::int64_t>(g.dim(0)) * g.dim(1);
    for (std::int64_t p = 0; p < planes; ++p) {
      const S* gi = g.data() + p * (h / 2) * (w / 2);
      S* go = gx.data() + p * h * w;
      for (int y = 0; y < h / 2; ++y)
        for (int xo = 0; xo < w / 2; ++xo) {
          const S v = gi[y * (w / 2) + xo] * S(0.25);
          S* r0 = go + (2 * y) * w + 2 * xo;
          r0[0] += v;
          r0[1] += v;
          r0[w] += v;
          r0[w + 1] += v;
        }
    }
  }));
}

template <typename S>
Var<S> instance_norm(Var<S> x, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = kernels::instance_norm_fwd(x.value(), eps);
  const bool ng = t.needs_grad(x.id);
  const int xid = x.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid, eps](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint_ref(self);
    const Tensor<S>& y = tp.value(self);
    const Tensor<S>& xv = tp.value(xid);
    Tensor<S>& gx = tp.adjoint(xid);
    const std::int64_t area = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
    const std::int64_t planes = static_cast<std::int64_t>(xv.dim(0)) * xv.dim(1);
    for (std::int64_t p = 0; p < planes; ++p) {
      Eigen::Map<const typename Tensor<S>::ArrayX> xi(xv.data() + p * area, area);
      Eigen::Map<const typename Tensor<S>::ArrayX> yi(y.data() + p * area, area);
      Eigen::Map<const typename Tensor<S>::ArrayX> gi(g.data() + p * area, area);
      Eigen::Map<typename Tensor<S>::ArrayX> go(gx.data() + p * area, area);
      const S mu = xi.mean();
      const S var = (xi - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + eps);
      const S gmean = gi.mean();
      const S gymean = (gi * yi).mean();
      go += inv * (gi - gmean - yi * gymean);
    }
  }));
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  detail::same_tape(x, w, "linear");
  detail::same_tape(x, b, "linear");
  Tape<S>& t = *x.tape;
  Tensor<S> out = kernels::linear_fwd(x.value(), w.value(), b.value());
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  const int xid = x.id, wid = w.id, bid = b.id;
  return t.wrap(t.push(std::move(out), ng, !ng ? typename Tape<S>::BackFn{} : [xid, wid, bid](Tape<S>& tp, int self) {
    const Tensor<S>& g = tp.adjoint_ref(self);
    const Tensor<S>& xv = tp.value(xid);
    const Tensor<S>& wv = tp.value(wid);
    const int n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    auto gm = g.mat(n, out_dim);
    if (tp.needs_grad(xid)) tp.adjoint(xid).mat(n, in).noalias() += gm * wv.mat(out_dim, in);
    if (tp.needs_grad(wid)) tp.adjoint(wid).mat(out_dim, in).noalias() += gm.transpose() * xv.mat(n, in);
    if (tp.needs_grad(bid)) tp.adjoint(bid).vec().noalias() += gm.colwise().sum().transpose();
  }));
}

// mean cross entropy over the batch, with a numerically stable softmax
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::vector<int> labels) {
  const Tensor<S>& lv = logits.value();
  if (lv.rank() != 2) throw Error("cross_entropy: expected NxC logits, got " + shape_str(lv.shape()));
  const int n = lv.dim(0), c = lv.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw Error("cross_entropy: label count " + std::to_string(labels.size()) +
                " does not match batch " + std::to_string(n));
  Tensor<S> probs({n, c});
  S loss = 0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c)
      throw Error("cross_entropy: label " + std::to_string(y) + " out of range for " +
                  std::to_string(c) + " classes");
    auto row = lv.vec().segment(static_cast<std::int64_t>(i) * c, c);
    const S mx = row.maxCoeff();
    auto pr = probs.vec().segment(static_cast<std::int64_t>(i) * c, c);
    pr = (row.array() - mx).exp();
    const S z = pr.sum();
    pr /= z;
    loss -= std::log(pr[y]);
  }
  loss /= static_cast<S>(n);
  Tape<S>& t = *logits.tape;
  const bool ng = t.needs_grad(logits.id);
  const int xid = logits.id;
  return t.wrap(t.push(Tensor<S>::scalar(loss), ng,
                       !ng ? typename Tape<S>::BackFn{}
                           : [xid, probs = std::move(probs), labels = std::move(labels)](Tape<S>& tp, int self) {
                               const S g = tp.adjoint_ref(self).item() / static_cast<S>(labels.size());
                               Tensor<S>& gx = tp.adjoint(xid);
                               const int n2 = probs.dim(0), c2 = probs.dim(1);
                               for (int i = 0; i < n2; ++i) {
                                 auto go = gx.vec().segment(static_cast<std::int64_t>(i) * c2, c2);
                                 go += g * probs.vec().segment(static_cast<std::int64_t>(i) * c2, c2);
                                 go[labels[static_cast<std::size_t>(i)]] -= g;
                               }
                             }));
}

}  // namespace kfs
