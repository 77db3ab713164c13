// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "cst/graph.hpp"

namespace cst {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Operands of a binary elementwise op: same shape, or one side a single element.
inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return a;
  if (numel(b) == 1) return a;
  if (numel(a) == 1) return b;
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

/// Reduces a gradient to the shape of a (possibly scalar-broadcast) operand.
template <typename Scalar>
Tensor<Scalar> reduce_to(const Tensor<Scalar>& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return Tensor<Scalar>::full(shape, g.data().sum());
}

template <typename Scalar>
Scalar element(const Tensor<Scalar>& t, std::int64_t i) {
  return t.size() == 1 ? t[0] : t[i];
}

struct ConvGeometry {
  int n, cin, h, w, cout, kh, kw, stride, padding, ho, wo;
  std::int64_t patch() const { return static_cast<std::int64_t>(cin) * kh * kw; }
  std::int64_t columns() const { return static_cast<std::int64_t>(n) * ho * wo; }
};

template <typename Scalar>
RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, const ConvGeometry& g) {
  RowMatrix<Scalar> cols = RowMatrix<Scalar>::Zero(g.patch(), g.columns());
  const std::int64_t plane = static_cast<std::int64_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        Scalar* row = cols.row((static_cast<std::int64_t>(c) * g.kh + i) * g.kw + j).data();
        for (int n = 0; n < g.n; ++n) {
          const Scalar* src = x.raw() + (static_cast<std::int64_t>(n) * g.cin + c) * g.h * g.w;
          Scalar* dst = row + n * plane;
          for (int oh = 0; oh < g.ho; ++oh) {
            const int ih = oh * g.stride - g.padding + i;
            if (ih < 0 || ih >= g.h) continue;
            for (int ow = 0; ow < g.wo; ++ow) {
              const int iw = ow * g.stride - g.padding + j;
              if (iw < 0 || iw >= g.w) continue;
              dst[oh * g.wo + ow] = src[ih * g.w + iw];
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
Tensor<Scalar> col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g) {
  Tensor<Scalar> x({g.n, g.cin, g.h, g.w});
  const std::int64_t plane = static_cast<std::int64_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const Scalar* row = cols.row((static_cast<std::int64_t>(c) * g.kh + i) * g.kw + j).data();
        for (int n = 0; n < g.n; ++n) {
          Scalar* dst = x.raw() + (static_cast<std::int64_t>(n) * g.cin + c) * g.h * g.w;
          const Scalar* src = row + n * plane;
          for (int oh = 0; oh < g.ho; ++oh) {
            const int ih = oh * g.stride - g.padding + i;
            if (ih < 0 || ih >= g.h) continue;
            for (int ow = 0; ow < g.wo; ++ow) {
              const int iw = ow * g.stride - g.padding + j;
              if (iw < 0 || iw >= g.w) continue;
              dst[ih * g.w + iw] += src[oh * g.wo + ow];
            }
          }
        }
      }
    }
  }
  return x;
}

/// NCHW gradient -> (Cout x N*Ho*Wo) matrix matching the GEMM layout.
template <typename Scalar>
RowMatrix<Scalar> nchw_to_cols(const Tensor<Scalar>& t, const ConvGeometry& g) {
  RowMatrix<Scalar> m(g.cout, g.columns());
  const std::int64_t plane = static_cast<std::int64_t>(g.ho) * g.wo;
  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.cout; ++o) {
      const Scalar* src = t.raw() + (static_cast<std::int64_t>(n) * g.cout + o) * plane;
      std::copy(src, src + plane, m.row(o).data() + n * plane);
    }
  }
  return m;
}

template <typename Scalar>
Tensor<Scalar> cols_to_nchw(const RowMatrix<Scalar>& m, const ConvGeometry& g) {
  Tensor<Scalar> t({g.n, g.cout, g.ho, g.wo});
  const std::int64_t plane = static_cast<std::int64_t>(g.ho) * g.wo;
  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.cout; ++o) {
      const Scalar* src = m.row(o).data() + n * plane;
      std::copy(src, src + plane, t.raw() + (static_cast<std::int64_t>(n) * g.cout + o) * plane);
    }
  }
  return t;
}

}  // namespace detail

/// Cross-correlation over NCHW input with OIHW weight and optional per-channel bias.
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> input, Var<Scalar> weight, std::type_identity_t<std::optional<Var<Scalar>>> bias, int stride,
                   int padding) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  detail::require(xs.size() == 4, "conv2d: input must be NCHW, got " + to_string(xs));
  detail::require(ws.size() == 4, "conv2d: weight must be OIHW, got " + to_string(ws));
  detail::require(xs[1] == ws[1], "conv2d: input has " + std::to_string(xs[1]) +
                                      " channels but weight expects " + std::to_string(ws[1]));
  detail::require(ws[2] % 2 == 1 && ws[3] % 2 == 1, "conv2d: kernel extents must be odd");
  detail::require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  detail::ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, padding, 0, 0};
  const int hnum = g.h + 2 * padding - g.kh;
  const int wnum = g.w + 2 * padding - g.kw;
  detail::require(hnum >= 0 && wnum >= 0, "conv2d: kernel larger than padded input " + to_string(xs));
  g.ho = hnum / stride + 1;
  g.wo = wnum / stride + 1;
  if (bias) {
    detail::require(bias->shape() == Shape{g.cout}, "conv2d: bias must have shape [" +
                                                        std::to_string(g.cout) + "]");
  }

  using Mat = detail::RowMatrix<Scalar>;
  const Eigen::Map<const Mat> wmat(weight.value().raw(), g.cout, g.patch());
  Mat out = wmat * detail::im2col(input.value(), g);
  if (bias) out.colwise() += bias->value().data();

  std::vector<Var<Scalar>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return input.graph().record(
      OpKind::kConv2d, inputs, detail::cols_to_nchw(out, g), {0, 1},
      [g, has_bias](BackwardContext<Scalar>& ctx) {
        const Mat gmat = detail::nchw_to_cols(ctx.grad(), g);
        if (ctx.needs_grad(1)) {
          const Mat dw = gmat * detail::im2col(ctx.saved(0), g).transpose();
          ctx.accumulate(1, Tensor<Scalar>({g.cout, g.cin, g.kh, g.kw},
                                           Eigen::Map<const typename Tensor<Scalar>::Vector>(
                                               dw.data(), dw.size())));
        }
        if (ctx.needs_grad(0)) {
          const Eigen::Map<const Mat> w(ctx.saved(1).raw(), g.cout, g.patch());
          const Mat dcols = w.transpose() * gmat;
          ctx.accumulate(0, detail::col2im(dcols, g));
        }
        if (has_bias && ctx.needs_grad(2)) {
          ctx.accumulate(2, Tensor<Scalar>({g.cout}, gmat.rowwise().sum()));
        }
      });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape(), x.value().data().cwiseMax(Scalar(0)));
  return x.graph().record(OpKind::kRelu, {x}, std::move(out), {kOutputSlot},
                          [](BackwardContext<Scalar>& ctx) {
                            const auto& y = ctx.saved(kOutputSlot);
                            Tensor<Scalar> g(y.shape());
                            g.data() = (y.data().array() > Scalar(0))
                                           .select(ctx.grad().data().array(), Scalar(0))
                                           .matrix();
                            ctx.accumulate(0, std::move(g));
                          });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape());
  out.data() = (Scalar(1) + (-x.value().data().array()).exp()).inverse().matrix();
  return x.graph().record(OpKind::kSigmoid, {x}, std::move(out), {kOutputSlot},
                          [](BackwardContext<Scalar>& ctx) {
                            const auto& y = ctx.saved(kOutputSlot).data().array();
                            Tensor<Scalar> g(ctx.input_shape(0));
                            g.data() = (ctx.grad().data().array() * y * (Scalar(1) - y)).matrix();
                            ctx.accumulate(0, std::move(g));
                          });
}

namespace detail {

template <typename Scalar, typename Fn>
Tensor<Scalar> zip(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const Shape& shape, Fn fn) {
  Tensor<Scalar> out(shape);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fn(element(a, i), element(b, i));
  return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  const Shape shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
  auto out = detail::zip(a.value(), b.value(), shape, [](Scalar x, Scalar y) { return x + y; });
  return a.graph().record(OpKind::kAdd, {a, b}, std::move(out), {}, [](BackwardContext<Scalar>& ctx) {
    for (int slot : {0, 1}) {
      if (ctx.needs_grad(slot)) ctx.accumulate(slot, detail::reduce_to(ctx.grad(), ctx.input_shape(slot)));
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  const Shape shape = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  auto out = detail::zip(a.value(), b.value(), shape, [](Scalar x, Scalar y) { return x - y; });
  return a.graph().record(OpKind::kSub, {a, b}, std::move(out), {}, [](BackwardContext<Scalar>& ctx) {
    if (ctx.needs_grad(0)) ctx.accumulate(0, detail::reduce_to(ctx.grad(), ctx.input_shape(0)));
    if (ctx.needs_grad(1)) {
      Tensor<Scalar> neg(ctx.grad().shape(), -ctx.grad().data());
      ctx.accumulate(1, detail::reduce_to(neg, ctx.input_shape(1)));
    }
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  const Shape shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  auto out = detail::zip(a.value(), b.value(), shape, [](Scalar x, Scalar y) { return x * y; });
  return a.graph().record(OpKind::kMul, {a, b}, std::move(out), {0, 1}, [](BackwardContext<Scalar>& ctx) {
    const auto& g = ctx.grad();
    for (int slot : {0, 1}) {
      if (!ctx.needs_grad(slot)) continue;
      const auto& other = ctx.saved(1 - slot);
      auto prod = detail::zip(g, other, g.shape(), [](Scalar x, Scalar y) { return x * y; });
      ctx.accumulate(slot, detail::reduce_to(prod, ctx.input_shape(slot)));
    }
  });
}

/// Elementwise maximum. The gradient goes to the strictly larger operand; on
/// exact ties all of it goes to the first operand.
template <typename Scalar>
Var<Scalar> emax(Var<Scalar> a, Var<Scalar> b) {
  const Shape shape = detail::broadcast_shape(a.shape(), b.shape(), "emax");
  auto out = detail::zip(a.value(), b.value(), shape, [](Scalar x, Scalar y) { return x >= y ? x : y; });
  return a.graph().record(OpKind::kEMax, {a, b}, std::move(out), {0, 1}, [](BackwardContext<Scalar>& ctx) {
    const auto& g = ctx.grad();
    const auto& x = ctx.saved(0);
    const auto& y = ctx.saved(1);
    if (ctx.needs_grad(0)) {
      Tensor<Scalar> ga(g.shape());
      for (std::int64_t i = 0; i < g.size(); ++i) {
        ga[i] = detail::element(x, i) >= detail::element(y, i) ? g[i] : Scalar(0);
      }
      ctx.accumulate(0, detail::reduce_to(ga, ctx.input_shape(0)));
    }
    if (ctx.needs_grad(1)) {
      Tensor<Scalar> gb(g.shape());
      for (std::int64_t i = 0; i < g.size(); ++i) {
        gb[i] = detail::element(x, i) >= detail::element(y, i) ? Scalar(0) : g[i];
      }
      ctx.accumulate(1, detail::reduce_to(gb, ctx.input_shape(1)));
    }
  });
}

/// Stacks two NCHW tensors along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(Var<Scalar> a, Var<Scalar> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.size() == 4 && bs.size() == 4, "concat_channels: operands must be NCHW");
  detail::require(as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
                  "concat_channels: N,H,W mismatch " + to_string(as) + " vs " + to_string(bs));
  const int n = as[0], ca = as[1], cb = bs[1];
  const std::int64_t plane = static_cast<std::int64_t>(as[2]) * as[3];
  Tensor<Scalar> out({n, ca + cb, as[2], as[3]});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().raw() + i * ca * plane, ca * plane, out.raw() + i * (ca + cb) * plane);
    std::copy_n(b.value().raw() + i * cb * plane, cb * plane, out.raw() + (i * (ca + cb) + ca) * plane);
  }
  return a.graph().record(OpKind::kConcatChannels, {a, b}, std::move(out), {},
                          [n, ca, cb, plane](BackwardContext<Scalar>& ctx) {
                            const auto& g = ctx.grad();
                            if (ctx.needs_grad(0)) {
                              Tensor<Scalar> ga(ctx.input_shape(0));
                              for (int i = 0; i < n; ++i)
                                std::copy_n(g.raw() + i * (ca + cb) * plane, ca * plane, ga.raw() + i * ca * plane);
                              ctx.accumulate(0, std::move(ga));
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor<Scalar> gb(ctx.input_shape(1));
                              for (int i = 0; i < n; ++i)
                                std::copy_n(g.raw() + (i * (ca + cb) + ca) * plane, cb * plane,
                                            gb.raw() + i * cb * plane);
                              ctx.accumulate(1, std::move(gb));
                            }
                          });
}

/// NCHW -> NC mean over the spatial extent.
template <typename Scalar>
Var<Scalar> global_avg_pool(Var<Scalar> x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4, "global_avg_pool: input must be NCHW, got " + to_string(s));
  const int rows = s[0] * s[1];
  const int plane = s[2] * s[3];
  const Eigen::Map<const detail::RowMatrix<Scalar>> m(x.value().raw(), rows, plane);
  Tensor<Scalar> out({s[0], s[1]}, m.rowwise().mean());
  return x.graph().record(OpKind::kGlobalAvgPool, {x}, std::move(out), {},
                          [rows, plane](BackwardContext<Scalar>& ctx) {
                            Tensor<Scalar> g(ctx.input_shape(0));
                            Eigen::Map<detail::RowMatrix<Scalar>> gm(g.raw(), rows, plane);
                            gm.colwise() = ctx.grad().data() / Scalar(plane);
                            ctx.accumulate(0, std::move(g));
                          });
}

/// x[N,F] * W[O,F]^T + b[O].
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, std::type_identity_t<std::optional<Var<Scalar>>> bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  detail::require(xs.size() == 2 && ws.size() == 2, "linear: expects x[N,F] and W[O,F]");
  detail::require(xs[1] == ws[1], "linear: feature mismatch " + to_string(xs) + " vs " + to_string(ws));
  if (bias) detail::require(bias->shape() == Shape{ws[0]}, "linear: bias must have shape [O]");
  using Mat = detail::RowMatrix<Scalar>;
  const int n = xs[0], f = xs[1], o = ws[0];
  const Eigen::Map<const Mat> xm(x.value().raw(), n, f);
  const Eigen::Map<const Mat> wm(weight.value().raw(), o, f);
  Mat out = xm * wm.transpose();
  if (bias) out.rowwise() += bias->value().data().transpose();
  std::vector<Var<Scalar>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return x.graph().record(
      OpKind::kLinear, inputs, Tensor<Scalar>({n, o}, Eigen::Map<const typename Tensor<Scalar>::Vector>(out.data(), out.size())),
      {0, 1}, [n, f, o, has_bias](BackwardContext<Scalar>& ctx) {
        const Eigen::Map<const Mat> gm(ctx.grad().raw(), n, o);
        if (ctx.needs_grad(0)) {
          const Eigen::Map<const Mat> wm(ctx.saved(1).raw(), o, f);
          const Mat dx = gm * wm;
          ctx.accumulate(0, Tensor<Scalar>({n, f}, Eigen::Map<const typename Tensor<Scalar>::Vector>(dx.data(), dx.size())));
        }
        if (ctx.needs_grad(1)) {
          const Eigen::Map<const Mat> xm(ctx.saved(0).raw(), n, f);
          const Mat dw = gm.transpose() * xm;
          ctx.accumulate(1, Tensor<Scalar>({o, f}, Eigen::Map<const typename Tensor<Scalar>::Vector>(dw.data(), dw.size())));
        }
        if (has_bias && ctx.needs_grad(2)) ctx.accumulate(2, Tensor<Scalar>({o}, gm.colwise().sum().transpose()));
      });
}

/// Per-channel scale_c * x + shift_c over axis 1 of a rank >= 2 tensor.
template <typename Scalar>
Var<Scalar> channel_affine(Var<Scalar> x, Var<Scalar> scale, Var<Scalar> shift) {
  const Shape& s = x.shape();
  detail::require(s.size() >= 2, "channel_affine: input rank must be >= 2");
  const int c = s[1];
  detail::require(scale.shape() == Shape{c} && shift.shape() == Shape{c},
                  "channel_affine: scale/shift must have length " + std::to_string(c));
  const int batch = s[0];
  const std::int64_t inner = numel(s) / (static_cast<std::int64_t>(batch) * c);
  using Mat = detail::RowMatrix<Scalar>;
  Tensor<Scalar> out(s);
  const auto& sc = scale.value();
  const auto& sh = shift.value();
  for (int n = 0; n < batch; ++n) {
    const Eigen::Map<const Mat> xm(x.value().raw() + n * c * inner, c, inner);
    Eigen::Map<Mat> om(out.raw() + n * c * inner, c, inner);
    om = (xm.array().colwise() * sc.data().array()).colwise() + sh.data().array();
  }
  return x.graph().record(
      OpKind::kChannelAffine, {x, scale, shift}, std::move(out), {0, 1},
      [batch, c, inner](BackwardContext<Scalar>& ctx) {
        const auto& g = ctx.grad();
        if (ctx.needs_grad(0)) {
          const auto& sc = ctx.saved(1);
          Tensor<Scalar> gx(ctx.input_shape(0));
          for (int n = 0; n < batch; ++n) {
            const Eigen::Map<const Mat> gm(g.raw() + n * c * inner, c, inner);
            Eigen::Map<Mat>(gx.raw() + n * c * inner, c, inner) = gm.array().colwise() * sc.data().array();
          }
          ctx.accumulate(0, std::move(gx));
        }
        if (ctx.needs_grad(1)) {
          const auto& xv = ctx.saved(0);
          Tensor<Scalar> gs({c});
          for (int n = 0; n < batch; ++n) {
            const Eigen::Map<const Mat> gm(g.raw() + n * c * inner, c, inner);
            const Eigen::Map<const Mat> xm(xv.raw() + n * c * inner, c, inner);
            gs.data() += (gm.array() * xm.array()).rowwise().sum().matrix();
          }
          ctx.accumulate(1, std::move(gs));
        }
        if (ctx.needs_grad(2)) {
          Tensor<Scalar> gt({c});
          for (int n = 0; n < batch; ++n) {
            const Eigen::Map<const Mat> gm(g.raw() + n * c * inner, c, inner);
            gt.data() += gm.rowwise().sum();
          }
          ctx.accumulate(2, std::move(gt));
        }
      });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  return x.graph().record(OpKind::kSum, {x}, Tensor<Scalar>::scalar(x.value().data().sum()), {},
                          [](BackwardContext<Scalar>& ctx) {
                            ctx.accumulate(0, Tensor<Scalar>::full(ctx.input_shape(0), ctx.grad()[0]));
                          });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  const Scalar count = static_cast<Scalar>(numel(x.shape()));
  return x.graph().record(OpKind::kMean, {x}, Tensor<Scalar>::scalar(x.value().data().sum() / count), {},
                          [count](BackwardContext<Scalar>& ctx) {
                            ctx.accumulate(0, Tensor<Scalar>::full(ctx.input_shape(0), ctx.grad()[0] / count));
                          });
}

/// Mean softmax cross-entropy of logits[N,K] against integer labels.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::vector<int> labels) {
  const Shape& s = logits.shape();
  detail::require(s.size() == 2, "cross_entropy: logits must be [N,K]");
  detail::require(static_cast<int>(labels.size()) == s[0], "cross_entropy: one label per row required");
  const int n = s[0], k = s[1];
  for (int y : labels) detail::require(y >= 0 && y < k, "cross_entropy: label out of range");
  using Mat = detail::RowMatrix<Scalar>;
  auto softmax = [n, k](const Tensor<Scalar>& z) {
    const Eigen::Map<const Mat> zm(z.raw(), n, k);
    Mat p = (zm.colwise() - zm.rowwise().maxCoeff()).array().exp().matrix();
    p.array().colwise() /= p.rowwise().sum().array();
    return p;
  };
  const Eigen::Map<const Mat> zm(logits.value().raw(), n, k);
  Scalar total = 0;
  for (int i = 0; i < n; ++i) {
    const Scalar m = zm.row(i).maxCoeff();
    const Scalar lse = m + std::log((zm.row(i).array() - m).exp().sum());
    total += lse - zm(i, labels[static_cast<std::size_t>(i)]);
  }
  return logits.graph().record(OpKind::kCrossEntropy, {logits}, Tensor<Scalar>::scalar(total / Scalar(n)), {0},
                               [n, k, labels = std::move(labels), softmax](BackwardContext<Scalar>& ctx) {
                                 Mat p = softmax(ctx.saved(0));
                                 for (int i = 0; i < n; ++i) p(i, labels[static_cast<std::size_t>(i)]) -= Scalar(1);
                                 p *= ctx.grad()[0] / Scalar(n);
                                 ctx.accumulate(0, Tensor<Scalar>({n, k}, Eigen::Map<const typename Tensor<Scalar>::Vector>(p.data(), p.size())));
                               });
}

template <typename Scalar>
Var<Scalar> mse_loss(Var<Scalar> pred, Var<Scalar> target) {
  detail::require(pred.shape() == target.shape(), "mse_loss: shape mismatch");
  const Scalar count = static_cast<Scalar>(numel(pred.shape()));
  const Scalar value = (pred.value().data() - target.value().data()).squaredNorm() / count;
  return pred.graph().record(OpKind::kMse, {pred, target}, Tensor<Scalar>::scalar(value), {0, 1},
                             [count](BackwardContext<Scalar>& ctx) {
                               Tensor<Scalar> d(ctx.input_shape(0));
                               d.data() = (ctx.saved(0).data() - ctx.saved(1).data()) * (Scalar(2) * ctx.grad()[0] / count);
                               if (ctx.needs_grad(1)) ctx.accumulate(1, Tensor<Scalar>(d.shape(), -d.data()));
                               if (ctx.needs_grad(0)) ctx.accumulate(0, std::move(d));
                             });
}

template <typename Scalar>
Var<Scalar> l1_loss(Var<Scalar> pred, Var<Scalar> target) {
  detail::require(pred.shape() == target.shape(), "l1_loss: shape mismatch");
  const Scalar count = static_cast<Scalar>(numel(pred.shape()));
  const Scalar value = (pred.value().data() - target.value().data()).cwiseAbs().sum() / count;
  return pred.graph().record(OpKind::kL1, {pred, target}, Tensor<Scalar>::scalar(value), {0, 1},
                             [count](BackwardContext<Scalar>& ctx) {
                               Tensor<Scalar> d(ctx.input_shape(0));
                               const auto diff = (ctx.saved(0).data() - ctx.saved(1).data()).array();
                               d.data() = (diff.sign() * (ctx.grad()[0] / count)).matrix();
                               if (ctx.needs_grad(1)) ctx.accumulate(1, Tensor<Scalar>(d.shape(), -d.data()));
                               if (ctx.needs_grad(0)) ctx.accumulate(0, std::move(d));
                             });
}

}  // namespace cst
