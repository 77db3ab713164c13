// SPDX-License-Identifier: Apache-2.0
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "cst/gradcheck.hpp"
#include "cst/ops.hpp"

namespace cst {
namespace {

using T = Tensor<float>;
using V = Var<float>;

// Direct sliding-window sum; independent of the im2col/GEMM path.
T brute_force_conv(const T& x, const T& w, int stride, int pad) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  T out({n, cout, ho, wo});
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < cout; ++o)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          double acc = 0;
          for (int c = 0; c < cin; ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int ih = oh * stride - pad + i, iw = ow * stride - pad + j;
                if (ih < 0 || iw < 0 || ih >= h || iw >= wd) continue;
                acc += static_cast<double>(x.at(b, c, ih, iw)) * w.at(o, c, i, j);
              }
          out.at(b, o, oh, ow) = static_cast<float>(acc);
        }
  return out;
}

T random_tensor(Shape shape, std::mt19937& rng) {
  T t(std::move(shape));
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

TEST(TensorTest, RejectsBadShapes) {
  EXPECT_THROW(T(Shape{}), ShapeError);
  EXPECT_THROW(T(Shape{2, 0}), ShapeError);
  EXPECT_THROW(T({3}, {1.0f, 2.0f}), ShapeError);
  EXPECT_EQ(T({2, 3}).size(), 6);
}

TEST(TensorTest, SerializationRoundTripsRandomShapes) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    Shape shape(static_cast<std::size_t>(1 + trial % 4));
    for (auto& d : shape) d = 1 + static_cast<int>(rng() % 4);
    const T t = random_tensor(shape, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(ss.str().size(), 4 * (1 + shape.size()) + 4 * static_cast<std::size_t>(t.size()));
    EXPECT_TRUE(read_tensor(ss).identical(t));
  }
}

TEST(TensorTest, SerializationLayoutIsRankShapePayload) {
  std::stringstream ss;
  write_tensor(ss, T({2}, {1.0f, -2.0f}));
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), std::string("\x01\x00\x00\x00\x02\x00\x00\x00", 8));
  EXPECT_EQ(bytes.substr(8), std::string("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8));
}

TEST(TensorTest, TruncatedStreamThrows) {
  std::stringstream ss(std::string("\x01\x00\x00\x00\x04\x00\x00\x00\x00\x00", 10));
  EXPECT_THROW(read_tensor(ss), std::runtime_error);
}

TEST(Conv2dTest, AllOnesValidIsNine) {
  Graph<float> g;
  const V out = conv2d(g.data(T::full({1, 1, 3, 3}, 1)), g.data(T::full({1, 1, 3, 3}, 1)), std::nullopt, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(out.value()[0], 9.0f);
}

TEST(Conv2dTest, AllOnesPaddedMatchesSlidingWindowOracle) {
  const T x = T::full({1, 1, 3, 3}, 1), w = T::full({1, 1, 3, 3}, 1);
  Graph<float> g;
  const V out = conv2d(g.data(x), g.data(w), std::nullopt, 1, 1);
  const T expected = brute_force_conv(x, w, 1, 1);
  EXPECT_TRUE(out.value().identical(expected));
  EXPECT_TRUE(expected.identical(T({1, 1, 3, 3}, {4, 6, 4, 6, 9, 6, 4, 6, 4})));
}

TEST(Conv2dTest, ZeroInputYieldsBias) {
  Graph<float> g;
  std::mt19937 rng(1);
  const V out = conv2d(g.data(T({1, 2, 2, 2})), g.data(random_tensor({2, 2, 3, 3}, rng)),
                       std::optional<V>(g.data(T({2}, {0.5f, -1.5f}))), 1, 1);
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w) {
      EXPECT_EQ(out.value().at(0, 0, h, w), 0.5f);
      EXPECT_EQ(out.value().at(0, 1, h, w), -1.5f);
    }
}

TEST(Conv2dTest, MatchesOracleOnRandomGeometries) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = trial % 2 ? 3 : 1, stride = 1 + trial % 3 / 2, pad = k == 3 ? trial % 2 : 0;
    const T x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, k, k}, rng);
    Graph<float> g;
    const V out = conv2d(g.data(x), g.data(w), std::nullopt, stride, pad);
    const T ref = brute_force_conv(x, w, stride, pad);
    ASSERT_EQ(out.shape(), ref.shape());
    for (std::int64_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.value()[i], ref[i], 1e-4);
  }
}

TEST(Conv2dTest, StructuredShapeErrors) {
  Graph<float> g;
  const V x = g.data(T({1, 2, 4, 4}));
  EXPECT_THROW(conv2d(x, g.data(T({1, 3, 3, 3})), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, g.data(T({1, 2, 2, 2})), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(g.data(T({1, 2, 2, 2})), g.data(T({1, 2, 3, 3})), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, g.data(T({2, 2, 3, 3})), std::optional<V>(g.data(T({3}))), 1, 1), ShapeError);
}

TEST(ElementwiseTest, Examples) {
  Graph<float> g;
  EXPECT_TRUE(emax(g.data(T({2}, {2, -2})), g.data(T({2}, {3, -3}))).value().identical(T({2}, {3, -2})));
  EXPECT_EQ(sigmoid(g.data(T({1}, {0}))).value()[0], 0.5f);
  EXPECT_THROW(add(g.data(T({2})), g.data(T({3}))), ShapeError);
  EXPECT_THROW(mul(g.data(T({2, 2})), g.data(T({4}))), ShapeError);
  // Scalar-with-tensor is the one broadcast allowed.
  EXPECT_TRUE(mul(g.data(T({3}, {1, 2, 3})), g.data(T({1}, {2}))).value().identical(T({3}, {2, 4, 6})));
}

TEST(ElementwiseTest, EMaxTieRoutesToFirstArgument) {
  Graph<float> g;
  const V a = g.parameter("a", T({1}, {1}), true);
  const V b = g.parameter("b", T({1}, {1}), true);
  const auto grads = g.backward(sum(emax(a, b)));
  EXPECT_EQ(grads.at("a")[0], 1.0f);
  EXPECT_EQ(grads.at("b")[0], 0.0f);
}

TEST(StructuralTest, Examples) {
  Graph<float> g;
  const V c = concat_channels(g.data(T({1, 2, 1, 1}, {1, 2})), g.data(T({1, 3, 1, 1}, {3, 4, 5})));
  EXPECT_TRUE(c.value().identical(T({1, 5, 1, 1}, {1, 2, 3, 4, 5})));
  EXPECT_EQ(global_avg_pool(g.data(T({1, 1, 2, 2}, {1, 2, 3, 4}))).value()[0], 2.5f);
  std::mt19937 rng(5);
  const T x = random_tensor({2, 3, 2, 2}, rng);
  EXPECT_TRUE(channel_affine(g.data(x), g.data(T::full({3}, 1)), g.data(T({3}))).value().identical(x));
  EXPECT_THROW(concat_channels(g.data(T({1, 1, 2, 2})), g.data(T({1, 1, 2, 3}))), ShapeError);
  EXPECT_THROW(channel_affine(g.data(x), g.data(T({2})), g.data(T({3}))), ShapeError);
  EXPECT_THROW(linear(g.data(T({2, 3})), g.data(T({4, 2})), std::nullopt), ShapeError);
}

TEST(BackwardTest, ReluGradient) {
  Graph<float> g;
  const V x = g.parameter("x", T({2}, {1, -1}), true);
  const auto grads = g.backward(sum(relu(x)));
  EXPECT_TRUE(grads.at("x").identical(T({2}, {1, 0})));
}

TEST(BackwardTest, FrozenOperandGetsNoEntry) {
  Graph<float> g;
  const V a = g.parameter("a", T({1}, {2}), true);
  const V b = g.parameter("b", T({1}, {3}), false);
  const auto grads = g.backward(sum(mul(a, b)));
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads.at("a")[0], 3.0f);
  EXPECT_FALSE(grads.contains("b"));
}

TEST(BackwardTest, ErrorPaths) {
  {
    Graph<float> g;
    const V x = g.parameter("x", T({2}), true);
    EXPECT_THROW(g.backward(relu(x)), ShapeError);
  }
  {
    Graph<float> g;
    const V x = g.parameter("x", T({2}), false);
    EXPECT_THROW(g.backward(sum(relu(x))), NoTrainablePathError);
  }
}

TEST(BackwardTest, GradientsOfSumDecomposeAdditively) {
  std::mt19937 rng(9);
  const T xv = random_tensor({1, 2, 3, 3}, rng), w1 = random_tensor({2, 2, 3, 3}, rng);
  auto grad_of = [&](int which) {
    Graph<float> g;
    const V x = g.parameter("x", xv, true);
    const V f1 = sum(sigmoid(conv2d(x, g.data(w1), std::nullopt, 1, 1)));
    const V f2 = sum(mul(x, x));
    const V loss = which == 0 ? f1 : which == 1 ? f2 : add(f1, f2);
    return g.backward(loss).at("x");
  };
  const T a = grad_of(0), b = grad_of(1), ab = grad_of(2);
  for (std::int64_t i = 0; i < ab.size(); ++i) EXPECT_NEAR(ab[i], a[i] + b[i], 1e-5);
}

TEST(FiniteDiffTest, Examples) {
  auto square_sum = [](const Tensor<double>& x) { return x.data().squaredNorm(); };
  EXPECT_NEAR(finite_diff_grad(square_sum, Tensor<double>({1}, {3.0}), 1e-3)[0], 6.0, 1e-4);
  auto plain_sum = [](const Tensor<double>& x) { return x.data().sum(); };
  const auto g = finite_diff_grad(plain_sum, Tensor<double>({4}, {0.3, -2, 5, 1e3}), 1e-3);
  for (std::int64_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 1.0, 1e-6);
  EXPECT_THROW(finite_diff_grad(plain_sum, Tensor<double>({1}), 0.0), std::invalid_argument);
}

TEST(FiniteDiffTest, MatchesBackwardOnThreeOpGraph) {
  std::mt19937 rng(21);
  const T xv = random_tensor({1, 2, 4, 4}, rng), wv = random_tensor({3, 2, 3, 3}, rng),
          sv = random_tensor({3}, rng), tv = random_tensor({3}, rng);
  auto f = [&](const Tensor<double>& w) {
    Graph<double> g;
    const auto y = channel_affine(conv2d(g.data(xv.cast<double>()), g.data(w), std::nullopt, 1, 0),
                                  g.data(sv.cast<double>()), g.data(tv.cast<double>()));
    return sum(sigmoid(y)).value().item();
  };
  Graph<float> g;
  const V w = g.parameter("w", wv, true);
  const auto y = channel_affine(conv2d(g.data(xv), w, std::nullopt, 1, 0), g.data(sv), g.data(tv));
  const T analytic = g.backward(sum(sigmoid(y))).at("w");
  const auto numeric = finite_diff_grad(f, wv.cast<double>(), 1e-3);
  for (std::int64_t i = 0; i < numeric.size(); ++i) {
    EXPECT_LT(relative_error(analytic[i], numeric[i]), 1e-2) << "element " << i;
  }
}

TEST(GradCheckTest, EveryOpPassesBothPrecisions) {
  GradCheckOptions opt;
  opt.trials = 25;
  for (const auto& r : run_gradcheck(gradcheck_op_names(), opt)) {
    EXPECT_TRUE(r.passed) << r.op << " err32=" << r.max_err32 << " err64=" << r.max_err64;
    EXPECT_EQ(r.instances, 25) << r.op;
  }
}

TEST(GradCheckTest, EMaxReportsSkippedTiePoints) {
  GradCheckOptions opt;
  opt.trials = 10;
  const auto r = run_gradcheck({"emax"}, opt).at(0);
  EXPECT_GT(r.skipped_points, 0);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheckTest, ZeroTrialsIsEmptyAndUnknownOpThrows) {
  GradCheckOptions opt;
  opt.trials = 0;
  EXPECT_TRUE(run_gradcheck(gradcheck_op_names(), opt).empty());
  opt.trials = 1;
  EXPECT_THROW(run_gradcheck({"softmaxx"}, opt), std::invalid_argument);
}

// x -> conv0 -> relu -> conv1 -> relu -> conv2 -> sum, one trainable conv.
struct Chain {
  std::vector<V> conv_out, relu_out;
  V input, loss;
};

Chain build_chain(Graph<float>& g, const std::vector<T>& weights, int trainable, const T& x) {
  Chain c;
  c.input = g.data(x);
  V h = c.input;
  for (int i = 0; i < static_cast<int>(weights.size()); ++i) {
    const V w = g.parameter("w" + std::to_string(i), weights[static_cast<std::size_t>(i)], i == trainable);
    c.conv_out.push_back(conv2d(h, w, std::nullopt, 1, 1));
    c.relu_out.push_back(relu(c.conv_out.back()));
    h = c.relu_out.back();
  }
  c.loss = sum(h);
  return c;
}

TEST(RetentionTest, ChainRetainsExactlyInputsOfOpsAfterTrainable) {
  std::mt19937 rng(4);
  std::vector<T> ws;
  for (int i = 0; i < 4; ++i) ws.push_back(random_tensor({2, 2, 3, 3}, rng));
  const T x = random_tensor({1, 2, 4, 4}, rng);
  for (int j = 0; j < 4; ++j) {
    Graph<float> g;
    const Chain c = build_chain(g, ws, j, x);
    g.prepare_backward(c.loss);
    // conv_i reads its input (relu_{i-1} or x); relu_i reads its own output.
    for (int i = 0; i < 4; ++i) {
      const bool on_path = i >= j;
      EXPECT_EQ(g.node(c.conv_out[static_cast<std::size_t>(i)].id()).active, on_path);
      EXPECT_FALSE(g.node(c.conv_out[static_cast<std::size_t>(i)].id()).retained);
      EXPECT_EQ(g.node(c.relu_out[static_cast<std::size_t>(i)].id()).retained, i >= j - 1) << i << " " << j;
    }
    EXPECT_EQ(g.node(c.input.id()).retained, j == 0);
    EXPECT_FALSE(g.node(c.loss.id()).retained);
  }
}

TEST(RetentionTest, ReleasingUnretainedValuesKeepsGradientsBitIdentical) {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<T> ws;
    for (int i = 0; i < 4; ++i) ws.push_back(random_tensor({2, 2, 3, 3}, rng));
    const T x = random_tensor({2, 2, 5, 5}, rng);
    const int trainable = trial % 4;
    Graph<float> kept, pruned;
    const Chain a = build_chain(kept, ws, trainable, x);
    const Chain b = build_chain(pruned, ws, trainable, x);
    pruned.prepare_backward(b.loss);
    EXPECT_GT(pruned.release_unretained(), 0u);
    EXPECT_THROW(pruned.value(b.conv_out[0].id()), ReleasedValueError);
    const auto ga = kept.backward(a.loss);
    const auto gb = pruned.backward(b.loss);
    ASSERT_EQ(ga.size(), 1u);
    EXPECT_TRUE(ga.begin()->second.identical(gb.begin()->second));
  }
}

TEST(RetentionTest, DeterministicTapesAndGradients) {
  std::mt19937 rng(2);
  std::vector<T> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(random_tensor({2, 2, 3, 3}, rng));
  const T x = random_tensor({1, 2, 4, 4}, rng);
  Graph<float> g1, g2;
  const Chain a = build_chain(g1, ws, 0, x), b = build_chain(g2, ws, 0, x);
  ASSERT_EQ(g1.size(), g2.size());
  for (NodeId id = 0; id < static_cast<NodeId>(g1.size()); ++id) {
    EXPECT_EQ(g1.node(id).kind, g2.node(id).kind);
    EXPECT_TRUE(g1.value(id).identical(g2.value(id)));
  }
  EXPECT_TRUE(g1.backward(a.loss).at("w0").identical(g2.backward(b.loss).at("w0")));
}

}  // namespace
}  // namespace cst
