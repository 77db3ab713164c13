// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cst/graph.hpp"

namespace cst {

using Real = float;
using RealTensor = Tensor<Real>;
using RealVar = Var<Real>;

/// Invalid configuration of a backbone, head or strategy.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Parameter {
  std::string name;
  RealTensor value;
  bool trainable = true;
};

/// Named parameters in insertion order. Graph leaves borrow the stored
/// tensors, so the store must not grow while a graph built from it is alive.
class ParameterStore {
 public:
  Parameter& add(std::string name, RealTensor value, bool trainable = true);

  bool contains(const std::string& name) const { return index_.contains(name); }
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::int64_t count() const;
  std::int64_t trainable_count() const;

  void set_trainable(bool trainable);
  /// Appends every parameter of `other`; names must not collide.
  void merge(const ParameterStore& other);

  RealVar var(Graph<Real>& graph, const std::string& name) const;

  /// Order-sensitive checksum over the named parameters' names and bytes.
  std::uint64_t checksum(const std::vector<std::string>& names) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Toy ResNet: stride-2 stem, then `n_stages` stages of basic residual blocks.
/// Stage i has stem_channels * 2^i channels and halves the resolution.
struct BackboneSpec {
  int n_stages = 4;
  int blocks_per_stage = 2;
  int stem_channels = 16;
  int in_channels = 3;

  /// Channels of L_i; i = 0 is the stem output.
  int channels(int i) const { return stem_channels << i; }
  void validate() const;
  /// Throws ShapeError unless both extents survive n_stages + 1 exact halvings.
  void validate_input(int height, int width) const;
};

/// L_0..L_n from the backbone, S_1..S_n from a side network, G_1..G_n from gates.
struct StageActivations {
  std::vector<RealVar> L;
  std::vector<RealVar> S;
  std::vector<RealVar> G;
};

/// Insertion points used by strategies that modify the backbone path itself.
struct BackboneHooks {
  std::function<RealVar(RealVar)> before_stem;
  std::function<std::optional<RealVar>(const std::string& conv)> conv_bias;
  /// Maps L_i to what stage i+1 (or the head) consumes.
  std::function<RealVar(int stage, RealVar)> after_stage;
};

struct Backbone {
  BackboneSpec spec;
  ParameterStore params;

  /// Every conv in forward order by parameter prefix, e.g. "backbone.stage1.block0.conv1".
  std::vector<std::string> conv_names() const;
  std::vector<std::string> parameter_names() const;
};

/// He-initialized (fan-in), bias-free convs; per-channel affine after each conv.
/// The second affine of each block starts at zero scale.
Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

struct BackboneOutput {
  StageActivations acts;
  RealVar top;  ///< final feature after hooks; L_n when no hook applies
};

/// Runs the backbone defined by `spec` with weights looked up in `params`.
BackboneOutput forward_backbone(const BackboneSpec& spec, const ParameterStore& params, RealVar input,
                                const BackboneHooks& hooks = {});

enum class TaskKind { kClassification, kRegression };

struct HeadSpec {
  TaskKind task = TaskKind::kClassification;
  int in_features = 0;
  int out_dim = 1;
};

struct Head {
  HeadSpec spec;
  ParameterStore params;
};

Head build_head(TaskKind task, int in_features, int out_dim, std::uint64_t seed);

/// Global average pool over `feature` followed by the linear layer.
RealVar forward_head(const ParameterStore& params, RealVar feature);

/// Small deterministic helpers shared by the module builders.
RealTensor he_normal(const Shape& shape, int fan_in, std::uint64_t seed);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name);

}  // namespace cst
