// SPDX-License-Identifier: Apache-2.0
#include "cst/memory.hpp"

#include <cstdio>
#include <sstream>

namespace cst {

std::vector<int> backward_reads(OpKind kind) {
  switch (kind) {
    case OpKind::kConv2d:
    case OpKind::kMul:
    case OpKind::kEMax:
    case OpKind::kLinear:
    case OpKind::kChannelAffine:
    case OpKind::kMse:
    case OpKind::kL1:
      return {0, 1};
    case OpKind::kRelu:
    case OpKind::kSigmoid:
      return {kOutputSlot};
    case OpKind::kCrossEntropy:
      return {0};
    case OpKind::kData:
    case OpKind::kParameter:
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kConcatChannels:
    case OpKind::kGlobalAvgPool:
    case OpKind::kSum:
    case OpKind::kMean:
      return {};
  }
  return {};
}

namespace {

bool is_leaf(OpKind k) { return k == OpKind::kData || k == OpKind::kParameter; }

std::vector<char> ancestors(const GraphStructure& s, const std::vector<NodeId>& roots) {
  std::vector<char> mark(s.nodes.size(), 0);
  NodeId top = -1;
  for (NodeId r : roots) {
    mark.at(static_cast<std::size_t>(r)) = 1;
    top = std::max(top, r);
  }
  for (NodeId id = top; id >= 0; --id) {
    if (!mark[static_cast<std::size_t>(id)]) continue;
    for (NodeId in : s.nodes[static_cast<std::size_t>(id)].inputs) mark[static_cast<std::size_t>(in)] = 1;
  }
  return mark;
}

}  // namespace

Retention predict_retention(const GraphStructure& s, NodeId loss, const std::set<std::string>& trainable) {
  const std::size_t n = s.nodes.size();
  if (s.nodes.at(static_cast<std::size_t>(loss)).elems != 1) throw ShapeError("loss must be a scalar");
  std::vector<char> grad(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = s.nodes[i];
    if (node.kind == OpKind::kParameter) {
      grad[i] = trainable.contains(node.name);
      continue;
    }
    for (NodeId in : node.inputs) grad[i] = grad[i] || grad[static_cast<std::size_t>(in)];
  }
  if (!grad[static_cast<std::size_t>(loss)]) {
    throw NoTrainablePathError("no trainable path: loss does not depend on any trainable parameter");
  }
  const std::vector<char> reaches = ancestors(s, {loss});
  Retention r;
  r.retained.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = s.nodes[i];
    if (is_leaf(node.kind) || !reaches[i] || !grad[i]) continue;
    for (int slot : backward_reads(node.kind)) {
      const std::size_t target = slot == kOutputSlot ? i : static_cast<std::size_t>(node.inputs.at(static_cast<std::size_t>(slot)));
      r.retained[target] = 1;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (r.retained[i] && s.nodes[i].kind != OpKind::kParameter) r.elems += s.nodes[i].elems;
  }
  return r;
}

std::int64_t liveness_peak(const GraphStructure& s, const std::vector<NodeId>& roots, const std::vector<char>& pinned) {
  const std::size_t n = s.nodes.size();
  const std::vector<char> needed = ancestors(s, roots);
  const auto end = static_cast<NodeId>(n);
  std::vector<NodeId> last(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!needed[i]) continue;
    last[i] = std::max(last[i], static_cast<NodeId>(i));
    for (NodeId in : s.nodes[i].inputs) last[static_cast<std::size_t>(in)] = static_cast<NodeId>(i);
  }
  for (NodeId r : roots) last[static_cast<std::size_t>(r)] = end;
  for (std::size_t i = 0; i < pinned.size() && i < n; ++i) {
    if (pinned[i] && needed[i]) last[i] = end;
  }
  std::vector<std::vector<NodeId>> dies(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (needed[i] && last[i] < end) dies[static_cast<std::size_t>(last[i])].push_back(static_cast<NodeId>(i));
  }
  std::int64_t live = 0, peak = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (!needed[t]) continue;
    if (s.nodes[t].kind != OpKind::kParameter) live += s.nodes[t].elems;
    peak = std::max(peak, live);
    for (NodeId d : dies[t]) {
      if (s.nodes[static_cast<std::size_t>(d)].kind != OpKind::kParameter) live -= s.nodes[static_cast<std::size_t>(d)].elems;
    }
  }
  return peak;
}

MemoryReport predict_retained(const GraphStructure& s, NodeId output, NodeId loss,
                              const std::set<std::string>& trainable) {
  const Retention r = predict_retention(s, loss, trainable);
  MemoryReport m;
  for (const auto& node : s.nodes) {
    if (node.kind != OpKind::kParameter) continue;
    m.total_params += node.elems;
    if (trainable.contains(node.name)) m.trainable_params += node.elems;
  }
  m.retained_train_elems = r.elems;
  m.peak_train_elems = liveness_peak(s, {loss}, r.retained);
  m.retained_infer_elems = liveness_peak(s, {output});
  m.optimizer_state_elems = 2 * m.trainable_params;
  return m;
}

RealVar model_loss(const ModelSpec& m, RealVar output, const std::vector<int>& labels, const RealTensor* targets) {
  if (m.head.task == TaskKind::kClassification) return cross_entropy(output, labels);
  Graph<Real>& g = output.graph();
  return mse_loss(output, g.data(targets ? *targets : RealTensor(output.shape())));
}

namespace {

std::set<std::string> mask_of(const ModelSpec& m) {
  const auto names = m.trainable_names();
  return {names.begin(), names.end()};
}

}  // namespace

MemoryReport predict_model(const ModelSpec& m, const Shape& input_shape) {
  Graph<Real> g;
  const ModelOutput out = forward_model(m, g.data(RealTensor(input_shape)));
  const RealVar loss = model_loss(m, out.output, std::vector<int>(static_cast<std::size_t>(input_shape.at(0)), 0), nullptr);
  return predict_retained(extract_structure(g), out.output.id(), loss.id(), mask_of(m));
}

MemoryReport measure_retained(const ModelSpec& m, const RealTensor& input, const std::vector<int>& labels) {
  Graph<Real> g;
  const ModelOutput out = forward_model(m, g.data(input));
  const RealVar loss = model_loss(m, out.output, labels, nullptr);
  MemoryReport rep = predict_retained(extract_structure(g), out.output.id(), loss.id(), mask_of(m));
  g.prepare_backward(loss);
  g.release_unretained();
  rep.retained_train_elems = alive_elems(g);
  g.backward(loss);
  return rep;
}

namespace {

std::string fmt_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> memory_headers() {
  return {"trainable_params", "total_params",   "train_elems",           "train_bytes", "peak_train_elems",
          "infer_elems",      "infer_bytes",    "optimizer_state_elems"};
}

std::vector<std::string> cells(const ReportRow& row, std::size_t n_metrics, const std::string& gap) {
  std::vector<std::string> out{row.strategy};
  if (row.memory) {
    const MemoryReport& m = *row.memory;
    for (std::int64_t v : {m.trainable_params, m.total_params, m.retained_train_elems,
                           m.retained_train_elems * MemoryReport::kBytesPerElem, m.peak_train_elems,
                           m.retained_infer_elems, m.retained_infer_elems * MemoryReport::kBytesPerElem,
                           m.optimizer_state_elems}) {
      out.push_back(std::to_string(v));
    }
  } else {
    out.insert(out.end(), memory_headers().size(), gap);
  }
  for (std::size_t i = 0; i < n_metrics; ++i) {
    out.push_back(i < row.metrics.size() && row.metrics[i] ? fmt_metric(*row.metrics[i]) : gap);
  }
  return out;
}

std::vector<std::string> header(const std::vector<std::string>& metric_columns) {
  std::vector<std::string> h{"strategy"};
  for (auto& c : memory_headers()) h.push_back(c);
  h.insert(h.end(), metric_columns.begin(), metric_columns.end());
  return h;
}

}  // namespace

std::string report_csv(const std::vector<ReportRow>& rows, const std::vector<std::string>& metric_columns) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '\n';
  };
  line(header(metric_columns));
  for (const auto& r : rows) line(cells(r, metric_columns.size(), ""));
  return os.str();
}

std::string report_markdown(const std::vector<ReportRow>& rows, const std::vector<std::string>& metric_columns) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& v) {
    os << '|';
    for (const auto& c : v) os << ' ' << c << " |";
    os << '\n';
  };
  const auto h = header(metric_columns);
  line(h);
  os << '|';
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? " ---: |" : " --- |");
  os << '\n';
  for (const auto& r : rows) line(cells(r, metric_columns.size(), "n/a"));
  return os.str();
}

}  // namespace cst
