// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cst/tensor.hpp"

namespace cst {

enum class OpKind {
  kData,
  kParameter,
  kConv2d,
  kRelu,
  kSigmoid,
  kAdd,
  kSub,
  kMul,
  kEMax,
  kConcatChannels,
  kGlobalAvgPool,
  kLinear,
  kChannelAffine,
  kSum,
  kMean,
  kCrossEntropy,
  kMse,
  kL1,
};

std::string_view op_name(OpKind kind);

using NodeId = int;

/// Marks the node's own output in a saved-value list.
inline constexpr int kOutputSlot = -1;

/// Raised by backward when the loss does not depend on any trainable parameter.
class NoTrainablePathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when backward reads a value the retention policy already released.
class ReleasedValueError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
class Graph;

/// Handle to a node on a graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return graph_->node(id_).shape; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  NodeId id_ = -1;
};

template <typename Scalar>
class BackwardContext;

/// Recorded forward computation (the tape).
///
/// Every op declares, at record time, which of its inputs (or its own output)
/// its gradient formula reads. `prepare_backward` marks the active path:
/// nodes that depend on a trainable parameter and feed the loss. Only values
/// read by active nodes are retained; `release_unretained` frees the rest and
/// `backward` never touches them.
template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;
  using ValuePtr = std::shared_ptr<const TensorT>;
  using BackwardFn = std::function<void(BackwardContext<Scalar>&)>;

  struct Node {
    OpKind kind = OpKind::kData;
    std::vector<NodeId> inputs;
    Shape shape;
    ValuePtr value;
    std::vector<int> saves;
    BackwardFn backward;
    std::string name;
    bool trainable = false;
    bool requires_grad = false;
    bool active = false;
    bool retained = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> data(TensorT value) {
    Node n;
    n.kind = OpKind::kData;
    n.shape = value.shape();
    n.value = std::make_shared<const TensorT>(std::move(value));
    return push(std::move(n));
  }

  /// Parameter leaf. One leaf per name; repeated calls return the same node.
  Var<Scalar> parameter(const std::string& name, ValuePtr value, bool trainable) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    Node n;
    n.kind = OpKind::kParameter;
    n.shape = value->shape();
    n.value = std::move(value);
    n.name = name;
    n.trainable = trainable;
    n.requires_grad = trainable;
    Var<Scalar> v = push(std::move(n));
    params_.emplace(name, v.id());
    return v;
  }

  Var<Scalar> parameter(const std::string& name, TensorT value, bool trainable) {
    return parameter(name, std::make_shared<const TensorT>(std::move(value)), trainable);
  }

  /// Non-owning leaf over storage that must outlive this graph.
  static ValuePtr borrow(const TensorT& t) { return ValuePtr(std::shared_ptr<void>(), &t); }

  Var<Scalar> record(OpKind kind, const std::vector<Var<Scalar>>& inputs, TensorT output,
                     std::vector<int> saves, BackwardFn backward) {
    if (prepared_) throw std::logic_error("cannot record onto a graph prepared for backward");
    Node n;
    n.kind = kind;
    n.shape = output.shape();
    n.value = std::make_shared<const TensorT>(std::move(output));
    n.saves = std::move(saves);
    n.backward = std::move(backward);
    for (const auto& in : inputs) {
      if (&in.graph() != this) throw std::logic_error("operand recorded on a different graph");
      n.inputs.push_back(in.id());
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  const TensorT& value(NodeId id) const {
    const Node& n = node(id);
    if (!n.value) {
      throw ReleasedValueError("value of node " + std::to_string(id) + " (" +
                               std::string(op_name(n.kind)) + ") was released");
    }
    return *n.value;
  }

  bool prepared() const { return prepared_; }
  std::optional<NodeId> loss() const { return loss_; }

  /// Marks the active path towards `loss` and the retained-value set.
  void prepare_backward(Var<Scalar> loss) {
    const Node& ln = node(loss.id());
    if (numel(ln.shape) != 1) {
      throw ShapeError("loss must be a scalar, got shape " + to_string(ln.shape));
    }
    if (!ln.requires_grad) {
      throw NoTrainablePathError("no trainable path: loss does not depend on any trainable parameter");
    }
    std::vector<char> reaches(nodes_.size(), 0);
    reaches[static_cast<std::size_t>(loss.id())] = 1;
    for (NodeId id = loss.id(); id >= 0; --id) {
      if (!reaches[static_cast<std::size_t>(id)]) continue;
      for (NodeId in : nodes_[static_cast<std::size_t>(id)].inputs) reaches[static_cast<std::size_t>(in)] = 1;
    }
    for (auto& n : nodes_) n.active = n.retained = false;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      const bool leaf = n.kind == OpKind::kData || n.kind == OpKind::kParameter;
      n.active = !leaf && reaches[static_cast<std::size_t>(id)] && n.requires_grad;
      if (!n.active) continue;
      for (int slot : n.saves) {
        const NodeId target = slot == kOutputSlot ? id : n.inputs.at(static_cast<std::size_t>(slot));
        nodes_[static_cast<std::size_t>(target)].retained = true;
      }
    }
    loss_ = loss.id();
    prepared_ = true;
  }

  /// Frees every non-parameter value that no active node reads in backward.
  std::size_t release_unretained() {
    if (!prepared_) throw std::logic_error("release_unretained before prepare_backward");
    std::size_t freed = 0;
    for (auto& n : nodes_) {
      if (n.kind == OpKind::kParameter || n.retained || !n.value) continue;
      n.value.reset();
      ++freed;
    }
    return freed;
  }

  /// Gradients for exactly the trainable parameters reachable from `loss`.
  std::map<std::string, TensorT> backward(Var<Scalar> loss) {
    if (!prepared_ || loss_ != loss.id()) prepare_backward(loss);
    std::vector<std::optional<TensorT>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id())] = TensorT::full(node(loss.id()).shape, Scalar(1));
    std::map<std::string, TensorT> out;
    for (NodeId id = loss.id(); id >= 0; --id) {
      auto& g = grads[static_cast<std::size_t>(id)];
      if (!g) continue;
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.kind == OpKind::kParameter) {
        if (n.trainable) out.emplace(n.name, std::move(*g));
        g.reset();
        continue;
      }
      if (!n.active) {
        g.reset();
        continue;
      }
      BackwardContext<Scalar> ctx(*this, id, grads);
      n.backward(ctx);
      g.reset();
    }
    return out;
  }

 private:
  friend class BackwardContext<Scalar>;

  Var<Scalar> push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> params_;
  std::optional<NodeId> loss_;
  bool prepared_ = false;
};

/// View handed to an op's gradient formula. Access to forward values is
/// restricted to the slots the op declared when it was recorded.
template <typename Scalar>
class BackwardContext {
 public:
  using TensorT = Tensor<Scalar>;

  BackwardContext(const Graph<Scalar>& graph, NodeId id, std::vector<std::optional<TensorT>>& grads)
      : graph_(graph), id_(id), grads_(grads) {}

  const TensorT& grad() const { return *grads_[static_cast<std::size_t>(id_)]; }

  const TensorT& saved(int slot) const {
    const auto& n = graph_.node(id_);
    bool declared = false;
    for (int s : n.saves) declared = declared || s == slot;
    if (!declared) {
      throw std::logic_error(std::string(op_name(n.kind)) + " backward read undeclared slot " +
                             std::to_string(slot));
    }
    return graph_.value(slot == kOutputSlot ? id_ : input_id(slot));
  }

  bool needs_grad(int slot) const { return graph_.node(input_id(slot)).requires_grad; }

  const Shape& input_shape(int slot) const { return graph_.node(input_id(slot)).shape; }

  void accumulate(int slot, TensorT g) {
    const NodeId target = input_id(slot);
    if (!graph_.node(target).requires_grad) {
      throw std::logic_error("gradient accumulated into an input that does not require it");
    }
    if (g.shape() != graph_.node(target).shape) {
      throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match input shape " +
                       to_string(graph_.node(target).shape));
    }
    auto& dst = grads_[static_cast<std::size_t>(target)];
    if (!dst) {
      dst = std::move(g);
    } else {
      dst->data() += g.data();
    }
  }

 private:
  NodeId input_id(int slot) const { return graph_.node(id_).inputs.at(static_cast<std::size_t>(slot)); }

  const Graph<Scalar>& graph_;
  NodeId id_;
  std::vector<std::optional<TensorT>>& grads_;
};

}  // namespace cst
