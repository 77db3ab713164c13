// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cst/graph.hpp"
#include "cst/strategies.hpp"

namespace cst {

/// Element counts; bytes are 4 per element.
struct MemoryReport {
  std::int64_t trainable_params = 0;
  std::int64_t total_params = 0;
  /// Activations kept for backward (sum over retained values).
  std::int64_t retained_train_elems = 0;
  /// Peak live activations during the training forward pass: retained values
  /// stay live to the end, everything else until its last consumer.
  std::int64_t peak_train_elems = 0;
  /// Peak live activations of a forward-only pass.
  std::int64_t retained_infer_elems = 0;
  std::int64_t optimizer_state_elems = 0;

  static constexpr std::int64_t kBytesPerElem = 4;
  bool operator==(const MemoryReport&) const = default;
};

/// Shape-level copy of a tape: what the predictor is allowed to look at.
struct GraphStructure {
  struct Node {
    OpKind kind = OpKind::kData;
    std::vector<NodeId> inputs;
    std::int64_t elems = 0;
    std::string name;  ///< parameter name, empty otherwise
  };
  std::vector<Node> nodes;
};

template <typename Scalar>
GraphStructure extract_structure(const Graph<Scalar>& g) {
  GraphStructure s;
  s.nodes.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& n = g.node(static_cast<NodeId>(i));
    s.nodes.push_back({n.kind, n.inputs, numel(n.shape), n.kind == OpKind::kParameter ? n.name : std::string()});
  }
  return s;
}

/// Values an op kind's gradient formula reads: input slots, or kOutputSlot.
std::vector<int> backward_reads(OpKind kind);

/// Per-node retained flags under the active-path rule plus their element total.
struct Retention {
  std::vector<char> retained;
  std::int64_t elems = 0;
};

/// Throws NoTrainablePathError when no named trainable parameter reaches `loss`.
Retention predict_retention(const GraphStructure& s, NodeId loss, const std::set<std::string>& trainable);

/// Peak of the live set over the recorded schedule. Values are live from
/// production to their last consumer among `roots`' ancestors; values flagged
/// in `pinned` stay live to the end. Parameters are not counted.
std::int64_t liveness_peak(const GraphStructure& s, const std::vector<NodeId>& roots,
                           const std::vector<char>& pinned = {});

/// Report from structure and trainable mask alone.
MemoryReport predict_retained(const GraphStructure& s, NodeId output, NodeId loss,
                              const std::set<std::string>& trainable);

/// Elements of non-parameter values still held by the graph.
template <typename Scalar>
std::int64_t alive_elems(const Graph<Scalar>& g) {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& n = g.node(static_cast<NodeId>(i));
    if (n.kind != OpKind::kParameter && n.value) total += numel(n.shape);
  }
  return total;
}

/// Task loss used for accounting and training: cross-entropy for classification,
/// MSE against `targets` for regression.
RealVar model_loss(const ModelSpec& m, RealVar output, const std::vector<int>& labels, const RealTensor* targets);

/// Builds the training tape of one batch and predicts its report from the
/// extracted structure and the model's trainable mask.
MemoryReport predict_model(const ModelSpec& m, const Shape& input_shape);

/// Runs forward, releases unretained values, counts the buffers that survive,
/// then runs backward on that tape. Liveness figures and parameter counts are
/// the predictor's; `retained_train_elems` is measured.
MemoryReport measure_retained(const ModelSpec& m, const RealTensor& input, const std::vector<int>& labels);

/// One table row: a strategy's memory figures and one value per metric column.
struct ReportRow {
  std::string strategy;
  std::optional<MemoryReport> memory;
  std::vector<std::optional<double>> metrics;
};

/// CSV with a header row; missing values are empty fields.
std::string report_csv(const std::vector<ReportRow>& rows, const std::vector<std::string>& metric_columns);
/// Markdown table; missing values are shown as "n/a".
std::string report_markdown(const std::vector<ReportRow>& rows, const std::vector<std::string>& metric_columns);

}  // namespace cst
