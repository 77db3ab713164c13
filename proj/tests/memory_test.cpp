// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "cst/memory.hpp"
#include "graph_oracles.hpp"

namespace cst {
namespace {

TEST(Predict, ThreeNodeChain) {
  std::mt19937_64 rng(1);
  Graph<Real> g;
  const RealVar x = g.data(random_tensor({1, 2, 5, 5}, rng));
  const RealVar w1 = g.parameter("w1", random_tensor({3, 2, 3, 3}, rng), false);
  const RealVar w2 = g.parameter("w2", random_tensor({2, 3, 3, 3}, rng), true);
  const RealVar h = conv2d(x, w1, std::nullopt, 1, 1);
  const RealVar y = conv2d(h, w2, std::nullopt, 1, 1);
  const RealVar loss = sum(y);
  // Only path: w2 -> conv2 -> sum. conv2's backward reads h (and w2); sum reads nothing.
  const Retention r = predict_retention(extract_structure(g), loss.id(), {"w2"});
  EXPECT_FALSE(r.retained[static_cast<std::size_t>(x.id())]);
  EXPECT_TRUE(r.retained[static_cast<std::size_t>(h.id())]);
  EXPECT_FALSE(r.retained[static_cast<std::size_t>(y.id())]);
  EXPECT_EQ(r.elems, 3 * 5 * 5);

  g.prepare_backward(loss);
  g.release_unretained();
  EXPECT_EQ(alive_elems(g), 3 * 5 * 5);
  EXPECT_NO_THROW(g.backward(loss));
  EXPECT_THROW(predict_retention(extract_structure(g), loss.id(), {}), NoTrainablePathError);
  EXPECT_THROW(predict_retention(extract_structure(g), y.id(), {"w2"}), ShapeError);
}

TEST(Predict, RandomGraphsMatchOracleAndMeasurement) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<Real> g;
    const RealVar loss = random_graph(g, trial, rng);

    const GraphStructure s = extract_structure(g);
    const Retention r = predict_retention(s, loss.id(), trainable_mask(g));
    const std::set<NodeId> oracle = oracle_retained(g, loss.id());
    std::set<NodeId> predicted;
    for (std::size_t i = 0; i < r.retained.size(); ++i) {
      if (r.retained[i] && g.node(static_cast<NodeId>(i)).kind != OpKind::kParameter) {
        predicted.insert(static_cast<NodeId>(i));
      }
    }
    EXPECT_EQ(predicted, oracle) << "trial " << trial;
    EXPECT_EQ(r.elems, elems_of(g, oracle));

    const auto full = g.backward(loss);
    g.release_unretained();
    EXPECT_EQ(alive_elems(g), r.elems) << "trial " << trial;
    const auto lean = g.backward(loss);
    for (const auto& [name, grad] : full) EXPECT_TRUE(grad.identical(lean.at(name))) << name;
  }
}

TEST(Liveness, ChainAndPinning) {
  Graph<Real> g;
  const RealVar x = g.data(RealTensor({4}));
  const RealVar w = g.parameter("w", RealTensor({4}), true);
  const RealVar a = relu(x);          // 4
  const RealVar b = mul(a, w);        // 4
  const RealVar c = sigmoid(b);       // 4
  const RealVar loss = sum(c);        // 1
  const GraphStructure s = extract_structure(g);
  // x+a live, then a+b, then b+c, then c+loss.
  EXPECT_EQ(liveness_peak(s, {c.id()}), 8);
  std::vector<char> pin(g.size(), 0);
  pin[static_cast<std::size_t>(x.id())] = 1;
  pin[static_cast<std::size_t>(a.id())] = 1;
  EXPECT_EQ(liveness_peak(s, {loss.id()}, pin), 16);
}

struct Models {
  Backbone backbone = build_backbone({}, 101);
  Head head = build_head(TaskKind::kClassification, 256, 4, 202);
};

const Models& models() {
  static const Models m;
  return m;
}

ModelSpec make(const std::string& label) {
  return apply_strategy(models().backbone, models().head, parse_strategy(label), 5);
}

TEST(Predict, EqualsMeasurementOnStrategies) {
  std::mt19937_64 rng(3);
  const RealTensor x = random_tensor({2, 3, 32, 32}, rng);
  for (const char* label :
       {"full", "frozen2", "frozen5", "bias", "prompt", "adapter", "lst", "cst", "cst-cm", "cst-dw", "cst-ba"}) {
    const ModelSpec m = make(label);
    const MemoryReport p = predict_model(m, x.shape());
    const MemoryReport q = measure_retained(m, x, {1, 2});
    EXPECT_EQ(p, q) << label;
    EXPECT_EQ(p.trainable_params, m.params.trainable_count()) << label;
    EXPECT_EQ(p.total_params, m.params.count()) << label;
    EXPECT_EQ(p.optimizer_state_elems, 2 * p.trainable_params);
    EXPECT_LE(p.retained_infer_elems, p.peak_train_elems) << label;
    EXPECT_LE(p.retained_train_elems, p.peak_train_elems) << label;
  }
}

// Non-parameter nodes recorded by the backbone that the training tape retains.
std::set<NodeId> retained_backbone(const ModelSpec& m, std::vector<NodeId>* stage_ids) {
  Graph<Real> g;
  const RealVar x = g.data(RealTensor({1, 3, 32, 32}));
  const ModelOutput out = forward_model(m, x);
  const RealVar loss = cross_entropy(out.output, {0});
  g.prepare_backward(loss);
  std::set<NodeId> ids;
  for (NodeId i = x.id(); i <= out.acts.L.back().id(); ++i) {
    if (g.node(i).kind != OpKind::kParameter && g.node(i).retained) ids.insert(i);
  }
  for (const auto& l : out.acts.L) stage_ids->push_back(l.id());
  return ids;
}

TEST(Predict, CstRetainsOnlyStageOutputs) {
  std::vector<NodeId> L;
  const std::set<NodeId> got = retained_backbone(make("cst"), &L);
  EXPECT_EQ(got, std::set<NodeId>(L.begin(), L.end()));
}

TEST(Predict, LstRetainsOnlyTappedStages) {
  std::vector<NodeId> L;
  const std::set<NodeId> got = retained_backbone(make("lst"), &L);
  EXPECT_EQ(got, std::set<NodeId>(L.begin() + 1, L.end()));
}

TEST(Predict, AdapterSkipsEverythingBeforeFirstAdapter) {
  const ModelSpec m = make("adapter");
  Graph<Real> g;
  const RealVar x = g.data(RealTensor({1, 3, 32, 32}));
  const ModelOutput out = forward_model(m, x);
  g.prepare_backward(cross_entropy(out.output, {0}));
  const NodeId first_input = out.acts.L[1].id();
  for (NodeId i = 0; i < first_input; ++i) {
    if (g.node(i).kind == OpKind::kParameter) continue;
    EXPECT_FALSE(g.node(i).retained) << i;
  }
  EXPECT_TRUE(g.node(first_input).retained);
}

TEST(Predict, FrozenLadderAndOrdering) {
  const Shape in{1, 3, 32, 32};
  std::int64_t prev = predict_model(make("full"), in).retained_train_elems;
  for (int k = 0; k <= 5; ++k) {
    const std::int64_t cur = predict_model(make("frozen" + std::to_string(k)), in).retained_train_elems;
    EXPECT_LE(cur, prev) << k;
    prev = cur;
  }
  const auto train = [&](const char* l) { return predict_model(make(l), in).retained_train_elems; };
  EXPECT_LT(train("lst"), train("adapter"));
  EXPECT_LT(train("cst"), train("adapter"));
  EXPECT_LT(train("adapter"), std::min({train("bias"), train("prompt"), train("full")}));
  EXPECT_EQ(train("bias"), train("full"));
  const MemoryReport c = predict_model(make("cst"), in);
  EXPECT_LT(c.retained_infer_elems, c.retained_train_elems);
}

TEST(Report, CsvGoldenAndGaps) {
  MemoryReport m;
  m.trainable_params = 10;
  m.total_params = 100;
  m.retained_train_elems = 7;
  m.peak_train_elems = 9;
  m.retained_infer_elems = 5;
  m.optimizer_state_elems = 20;
  const std::vector<ReportRow> rows = {{"full", m, {0.5, std::nullopt}}, {"cst", std::nullopt, {0.25}}};
  const std::string golden =
      "strategy,trainable_params,total_params,train_elems,train_bytes,peak_train_elems,infer_elems,infer_bytes,"
      "optimizer_state_elems,subset,none\n"
      "full,10,100,7,28,9,5,20,20,0.500000,\n"
      "cst,,,,,,,,,0.250000,\n";
  EXPECT_EQ(report_csv(rows, {"subset", "none"}), golden);
  const std::string md = report_markdown(rows, {"subset", "none"});
  EXPECT_NE(md.find("| cst | n/a |"), std::string::npos);
  EXPECT_NE(md.find("| 0.500000 | n/a |"), std::string::npos);
}

TEST(Report, EmptyIsHeaderOnly) {
  EXPECT_EQ(report_csv({}, {}),
            "strategy,trainable_params,total_params,train_elems,train_bytes,peak_train_elems,infer_elems,"
            "infer_bytes,optimizer_state_elems\n");
  const std::string md = report_markdown({}, {});
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 2);
}

}  // namespace
}  // namespace cst
