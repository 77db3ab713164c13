// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "cst/backbone.hpp"
#include "cst/ops.hpp"

namespace cst {
namespace {

RealTensor random_input(Shape shape, std::uint64_t seed) {
  RealTensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

TEST(Backbone, DefaultShapeTrace) {
  const Backbone bb = build_backbone({}, 7);
  Graph<Real> g;
  const auto out = forward_backbone(bb.spec, bb.params, g.data(RealTensor({1, 3, 64, 64})));
  // stem /2 -> 32, then each stage halves: 16, 8, 4, 2; channels double from 16.
  const std::vector<Shape> expected = {
      {1, 16, 32, 32}, {1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}, {1, 256, 2, 2}};
  ASSERT_EQ(out.acts.L.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(out.acts.L[i].shape(), expected[i]) << i;
  EXPECT_TRUE(out.acts.S.empty());
  EXPECT_TRUE(out.acts.G.empty());
  EXPECT_EQ(out.top.id(), out.acts.L.back().id());
}

TEST(Backbone, ShapeLawAcrossConfigs) {
  for (int n : {1, 2, 3}) {
    for (int stem : {4, 8}) {
      BackboneSpec spec{n, 1, stem, 3};
      const Backbone bb = build_backbone(spec, 1);
      const int side = 1 << (n + 2);
      Graph<Real> g;
      const auto out = forward_backbone(bb.spec, bb.params, g.data(RealTensor({2, 3, side, side})));
      for (int i = 0; i <= n; ++i) {
        const Shape& s = out.acts.L[static_cast<std::size_t>(i)].shape();
        EXPECT_EQ(s[1], stem << i);
        EXPECT_EQ(s[2], side >> (i + 1));
        EXPECT_EQ(s[3], side >> (i + 1));
      }
    }
  }
}

TEST(Backbone, SingleStageSingleBlock) {
  const Backbone bb = build_backbone({1, 1, 8, 3}, 3);
  EXPECT_EQ(bb.conv_names(), (std::vector<std::string>{"backbone.stem.conv", "backbone.stage1.block0.conv1",
                                                       "backbone.stage1.block0.conv2",
                                                       "backbone.stage1.block0.proj"}));
  Graph<Real> g;
  const auto out = forward_backbone(bb.spec, bb.params, g.data(random_input({1, 3, 8, 8}, 5)));
  ASSERT_EQ(out.acts.L.size(), 2u);

  // Hand-assembled block on the same weights.
  const auto& ps = bb.params;
  const std::string p = "backbone.stage1.block0.";
  RealVar x = out.acts.L[0];
  RealVar h = relu(channel_affine(conv2d(x, ps.var(g, p + "conv1.weight"), std::nullopt, 2, 1),
                                  ps.var(g, p + "affine1.scale"), ps.var(g, p + "affine1.shift")));
  h = channel_affine(conv2d(h, ps.var(g, p + "conv2.weight"), std::nullopt, 1, 1), ps.var(g, p + "affine2.scale"),
                     ps.var(g, p + "affine2.shift"));
  RealVar sc = channel_affine(conv2d(x, ps.var(g, p + "proj.weight"), std::nullopt, 2, 0),
                              ps.var(g, p + "proj_affine.scale"), ps.var(g, p + "proj_affine.shift"));
  EXPECT_TRUE(relu(add(h, sc)).value().identical(out.acts.L[1].value()));
}

TEST(Backbone, SameSeedBitIdentical) {
  const Backbone a = build_backbone({}, 11);
  const Backbone b = build_backbone({}, 11);
  const Backbone c = build_backbone({}, 12);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.all()[i].name, b.params.all()[i].name);
    EXPECT_TRUE(a.params.all()[i].value.identical(b.params.all()[i].value));
  }
  EXPECT_EQ(a.params.checksum(a.parameter_names()), b.params.checksum(b.parameter_names()));
  EXPECT_NE(a.params.checksum(a.parameter_names()), c.params.checksum(c.parameter_names()));
}

TEST(Backbone, ZeroInputGivesZeroActivations) {
  const Backbone bb = build_backbone({}, 2);
  Graph<Real> g;
  const auto out = forward_backbone(bb.spec, bb.params, g.data(RealTensor({1, 3, 32, 32})));
  for (const auto& l : out.acts.L) EXPECT_EQ(l.value().data().cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Backbone, ZeroedBlockIsIdentity) {
  // Block 1 of each stage has an identity shortcut; zeroing its convs leaves
  // relu(shift + x) = x for the nonnegative post-relu input.
  BackboneSpec two{2, 2, 8, 3};
  BackboneSpec one{2, 1, 8, 3};
  Backbone deep = build_backbone(two, 9);
  const Backbone shallow = build_backbone(one, 9);
  for (int s = 1; s <= 2; ++s) {
    for (const char* c : {"conv1", "conv2"}) {
      auto& w = deep.params.get("backbone.stage" + std::to_string(s) + ".block1." + c + ".weight").value;
      w.data().setZero();
    }
  }
  const RealTensor x = random_input({1, 3, 16, 16}, 4);
  Graph<Real> g1, g2;
  const auto a = forward_backbone(deep.spec, deep.params, g1.data(x));
  const auto b = forward_backbone(shallow.spec, shallow.params, g2.data(x));
  for (std::size_t i = 0; i < a.acts.L.size(); ++i) {
    EXPECT_TRUE(a.acts.L[i].value().identical(b.acts.L[i].value())) << i;
  }
}

TEST(Backbone, InitializationScales) {
  const Backbone bb = build_backbone({}, 1);
  EXPECT_EQ(bb.params.get("backbone.stage1.block0.affine2.scale").value.data().cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(bb.params.get("backbone.stage1.block0.affine1.scale").value[0], 1.0f);
  const auto& w = bb.params.get("backbone.stage4.block1.conv1.weight").value;
  const double var = w.data().cast<double>().squaredNorm() / static_cast<double>(w.size());
  EXPECT_NEAR(var, 2.0 / (256 * 9), 0.1 * 2.0 / (256 * 9));
}

TEST(Backbone, InputTooSmall) {
  const Backbone bb = build_backbone({}, 1);
  Graph<Real> g;
  EXPECT_THROW(forward_backbone(bb.spec, bb.params, g.data(RealTensor({1, 3, 16, 16}))), ShapeError);
  EXPECT_THROW(forward_backbone(bb.spec, bb.params, g.data(RealTensor({1, 3, 40, 32}))), ShapeError);
  EXPECT_THROW(forward_backbone(bb.spec, bb.params, g.data(RealTensor({1, 1, 32, 32}))), ShapeError);
  EXPECT_THROW(build_backbone({0, 1, 16, 3}, 1), ConfigError);
}

TEST(Head, Shapes) {
  const Head reg = build_head(TaskKind::kRegression, 256, 1, 3);
  EXPECT_EQ(reg.params.get("head.fc.weight").value.shape(), (Shape{1, 256}));
  const Head cls = build_head(TaskKind::kClassification, 256, 5, 3);
  Graph<Real> g;
  const RealVar logits = forward_head(cls.params, g.data(random_input({3, 256, 2, 2}, 1)));
  EXPECT_EQ(logits.shape(), (Shape{3, 5}));
  EXPECT_THROW(build_head(TaskKind::kClassification, 256, 0, 3), ConfigError);
}

TEST(ParameterStore, DuplicateAndUnknown) {
  ParameterStore ps;
  ps.add("a", RealTensor({2}));
  EXPECT_THROW(ps.add("a", RealTensor({2})), ConfigError);
  EXPECT_THROW(ps.get("b"), ConfigError);
  ps.add("b", RealTensor({3}), false);
  EXPECT_EQ(ps.count(), 5);
  EXPECT_EQ(ps.trainable_count(), 2);
}

}  // namespace
}  // namespace cst
