// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cst/backbone.hpp"
#include "cst/ops.hpp"

namespace cst {

enum class StrategyKind { kFull, kFrozenK, kBias, kPrompt, kAdapter, kLst, kCst };

/// Fusion of a backbone feature L with a side feature S of the same shape.
///   CM:  conv3x3(concat(L, S)), 2C -> C channels
///   DW:  a L + (1 - a) S, a = sigmoid(per-stage scalar)
///   BA:  L * sigmoid(S)
///   MTC: max(L, L * S)
enum class GateKind { kCM, kDW, kBA, kMTC };

std::string to_string(StrategyKind kind);
std::string to_string(GateKind kind);
GateKind parse_gate(const std::string& text);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::kFull;
  /// frozen_k only: freeze the stem and the first min(k, n) stages.
  int k = 0;
  GateKind gate = GateKind::kMTC;
  /// Per-stage reduction factors; empty selects `default_r_schedule`.
  std::vector<int> r_schedule;
  bool head_trainable = true;
  int prompt_kernel = 3;

  /// Short row label, e.g. "full", "frozen2", "cst", "cst-cm".
  std::string label() const;
};

/// Parses a row label back into a config ("frozen3", "cst-dw", ...).
StrategyConfig parse_strategy(const std::string& label);

/// 4 for the first half of the stages, 8 for the rest.
std::vector<int> default_r_schedule(int n_stages);

/// Gate parameters for one stage; CM reads weight/bias, DW reads alpha.
template <typename Scalar>
struct GateParams {
  std::optional<Var<Scalar>> weight;
  std::optional<Var<Scalar>> bias;
  std::optional<Var<Scalar>> alpha;
};

template <typename Scalar>
Var<Scalar> gate_apply(GateKind kind, Var<Scalar> L, Var<Scalar> S, const GateParams<Scalar>& p = {}) {
  if (L.shape() != S.shape()) {
    throw ShapeError("gate operands differ: L " + to_string(L.shape()) + " vs S " + to_string(S.shape()));
  }
  switch (kind) {
    case GateKind::kCM:
      if (!p.weight) throw ConfigError("CM gate needs a compress weight");
      return conv2d(concat_channels(L, S), *p.weight, p.bias, 1, 1);
    case GateKind::kDW: {
      if (!p.alpha) throw ConfigError("DW gate needs an alpha parameter");
      const Var<Scalar> a = sigmoid(*p.alpha);
      const Var<Scalar> one = L.graph().data(Tensor<Scalar>::scalar(Scalar(1)));
      return add(mul(L, a), mul(S, sub(one, a)));
    }
    case GateKind::kBA:
      return mul(L, sigmoid(S));
    case GateKind::kMTC:
      // Calibrated branch first: on the L == L*S tie the side path receives the gradient.
      return emax(mul(L, S), L);
  }
  throw ConfigError("unknown gate kind");
}

/// A backbone plus head with a strategy attached: one parameter store holding
/// everything, a trainable mask, and the names of each part.
struct ModelSpec {
  BackboneSpec backbone;
  HeadSpec head;
  StrategyConfig strategy;
  ParameterStore params;
  std::vector<std::string> backbone_names;
  std::vector<std::string> extra_names;
  std::vector<std::string> head_names;

  std::vector<std::string> trainable_names() const;
};

/// Copies the backbone and head, sets the trainable mask and adds the
/// strategy's modules. Throws ConfigError on an invalid config.
ModelSpec apply_strategy(const Backbone& backbone, const Head& head, const StrategyConfig& cfg, std::uint64_t seed);

struct ModelOutput {
  RealVar output;  ///< head output: logits or regression values
  StageActivations acts;
};

ModelOutput forward_model(const ModelSpec& model, RealVar input);

}  // namespace cst
