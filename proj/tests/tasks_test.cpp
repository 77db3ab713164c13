// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "cst/tasks.hpp"
#include "cst/train.hpp"

namespace cst {
namespace {

SourceSpec small_source() {
  SourceSpec s;
  s.train = 64;
  s.val = 32;
  return s;
}

TaskSpec small_task(Correlation kind) {
  TaskSpec t;
  t.kind = kind;
  t.train = 32;
  t.val = 16;
  return t;
}

std::vector<const RealTensor*> tensors(const Generator& g) {
  std::vector<const RealTensor*> out;
  for (const auto* list : {&g.prototypes, &g.conv_weights, &g.conv_biases}) {
    for (const auto& t : *list) out.push_back(&t);
  }
  return out;
}

TEST(Tasks, SourceIsDeterministic) {
  const SourceTask a = make_source_task(small_source());
  const SourceTask b = make_source_task(small_source());
  EXPECT_TRUE(a.data.train.images.identical(b.data.train.images));
  EXPECT_TRUE(a.data.val.images.identical(b.data.val.images));
  EXPECT_EQ(a.data.train.labels, b.data.train.labels);
  SourceSpec other = small_source();
  other.seed = 9;
  EXPECT_FALSE(make_source_task(other).data.train.images.identical(a.data.train.images));
}

TEST(Tasks, ShapesAndExactBalance) {
  const SourceTask src = make_source_task(small_source());
  EXPECT_EQ(src.data.train.images.shape(), (Shape{64, 3, 32, 32}));
  std::map<int, int> counts;
  for (int l : src.data.train.labels) ++counts[l];
  ASSERT_EQ(counts.size(), 8u);
  for (auto [label, n] : counts) EXPECT_EQ(n, 8) << label;
  for (auto kind : {Correlation::kSubset, Correlation::kStrong, Correlation::kWeak, Correlation::kNone}) {
    const TaskData t = make_target_task(small_task(kind), src);
    std::map<int, int> c;
    for (int l : t.train.labels) ++c[l];
    ASSERT_EQ(c.size(), 4u) << to_string(kind);
    for (auto [label, n] : c) EXPECT_EQ(n, 8) << label;
  }
}

TEST(Tasks, TrainAndValAreDisjoint) {
  const TaskData t = make_target_task(small_task(Correlation::kSubset), make_source_task(small_source()));
  const std::int64_t per = 3 * 32 * 32;
  for (int i = 0; i < t.train.size(); ++i) {
    for (int j = 0; j < t.val.size(); ++j) {
      EXPECT_NE(t.train.images.data().segment(i * per, per), t.val.images.data().segment(j * per, per));
    }
  }
}

TEST(Tasks, SubsetReusesSourcePrototypesVerbatim) {
  const SourceTask src = make_source_task(small_source());
  const Generator g = make_target_generator(small_task(Correlation::kSubset), src);
  ASSERT_EQ(g.classes(), 4);
  for (const auto& p : g.prototypes) {
    bool found = false;
    for (const auto& q : src.generator.prototypes) found = found || p.identical(q);
    EXPECT_TRUE(found);
  }
  for (std::size_t l = 0; l < g.conv_weights.size(); ++l) {
    EXPECT_TRUE(g.conv_weights[l].identical(src.generator.conv_weights[l]));
  }
}

TEST(Tasks, FullSubsetIsTheSourceGenerator) {
  const SourceTask src = make_source_task(small_source());
  TaskSpec all = small_task(Correlation::kSubset);
  all.classes = 8;
  const Generator g = make_target_generator(all, src);
  ASSERT_EQ(g.classes(), src.generator.classes());
  const auto a = tensors(g), b = tensors(src.generator);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i]->identical(*b[i])) << i;
  EXPECT_EQ(g.output_scale, src.generator.output_scale);
}

TEST(Tasks, NoneSharesNoGeneratorParameters) {
  const SourceTask src = make_source_task(small_source());
  const Generator g = make_target_generator(small_task(Correlation::kNone), src);
  for (const RealTensor* t : tensors(g)) {
    for (const RealTensor* s : tensors(src.generator)) {
      if (t->shape() != s->shape()) continue;
      for (std::int64_t i = 0; i < t->size(); ++i) ASSERT_NE((*t)[i], (*s)[i]);
    }
  }
}

TEST(Tasks, DecoderDriftGrowsFromStrongToWeak) {
  const SourceTask src = make_source_task(small_source());
  auto drift = [&](Correlation kind) {
    const Generator g = make_target_generator(small_task(kind), src);
    double d = 0, n = 0;
    for (std::size_t l = 0; l < g.conv_weights.size(); ++l) {
      d += (g.conv_weights[l].data() - src.generator.conv_weights[l].data()).squaredNorm();
      n += src.generator.conv_weights[l].data().squaredNorm();
    }
    return d / n;
  };
  const double strong = drift(Correlation::kStrong), weak = drift(Correlation::kWeak);
  EXPECT_EQ(drift(Correlation::kSubset), 0.0);
  EXPECT_GT(strong, 0.0);
  EXPECT_GT(weak, strong);
}

TEST(Tasks, OversizedSubsetThrows) {
  const SourceTask src = make_source_task(small_source());
  TaskSpec t = small_task(Correlation::kSubset);
  t.classes = 9;
  EXPECT_THROW(make_target_task(t, src), ConfigError);
  t.kind = Correlation::kWeak;
  EXPECT_THROW(make_target_task(t, src), ConfigError);
  t.kind = Correlation::kNone;
  EXPECT_NO_THROW(make_target_task(t, src));
  EXPECT_THROW(parse_correlation("medium"), ConfigError);
}

TEST(Tasks, DatasetRoundTrip) {
  const TaskData t = make_target_task(small_task(Correlation::kStrong), make_source_task(small_source()));
  const auto dir = std::filesystem::temp_directory_path() / "cst_tasks_test";
  std::filesystem::remove_all(dir);
  save_dataset(dir, "train", t.train);
  const Dataset back = load_dataset(dir, "train");
  EXPECT_TRUE(back.images.identical(t.train.images));
  EXPECT_EQ(back.labels, t.train.labels);
  EXPECT_EQ(back.classes, t.train.classes);
  EXPECT_THROW(load_dataset(dir, "missing"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Tasks, FullTuningBeatsChanceOnSource) {
  SourceSpec s = small_source();
  s.train = 128;
  s.val = 64;
  const SourceTask src = make_source_task(s);
  ModelSpec m = apply_strategy(build_backbone({}, 1), build_head(TaskKind::kClassification, 256, 8, 2),
                               parse_strategy("full"), 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  const TrainLog log = train(m, src.data, cfg);
  EXPECT_GT(log.epochs.back().val_accuracy, 2.0 / 8);
}

}  // namespace
}  // namespace cst
