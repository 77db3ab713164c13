// SPDX-License-Identifier: Apache-2.0
#include "cst/gradcheck.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <random>

#include "cst/ops.hpp"

namespace cst {

namespace {

enum class Case {
  kConv2d,
  kRelu,
  kSigmoid,
  kAdd,
  kSub,
  kMul,
  kEMax,
  kConcat,
  kGap,
  kLinear,
  kAffine,
  kSum,
  kMean,
  kCrossEntropy,
  kMse,
  kL1,
  kComposite,
};

struct CaseInfo {
  const char* name;
  Case kind;
};

constexpr CaseInfo kCases[] = {
    {"conv2d", Case::kConv2d},         {"relu", Case::kRelu},
    {"sigmoid", Case::kSigmoid},       {"add", Case::kAdd},
    {"sub", Case::kSub},               {"mul", Case::kMul},
    {"emax", Case::kEMax},             {"concat_channels", Case::kConcat},
    {"global_avg_pool", Case::kGap},   {"linear", Case::kLinear},
    {"channel_affine", Case::kAffine}, {"sum", Case::kSum},
    {"mean", Case::kMean},             {"cross_entropy", Case::kCrossEntropy},
    {"mse_loss", Case::kMse},          {"l1_loss", Case::kL1},
    {"composite", Case::kComposite},
};

// Unary/binary elementwise ops drawn for composite graphs.
enum class Step { kRelu, kSigmoid, kAdd, kSub, kMul, kEMax };

struct Instance {
  Case kind;
  std::vector<Tensor<double>> leaves;
  std::optional<Tensor<double>> weights;  // contracts a non-scalar output to a scalar
  int stride = 1;
  int padding = 0;
  std::vector<int> labels;
  std::vector<Step> steps;
};

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  // Values rounded through float so both engines evaluate the same point.
  Tensor<double> uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(d(rng_));
    return t;
  }

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }

 private:
  std::mt19937_64 rng_;
};

Instance make_instance(Case kind, Sampler& s) {
  Instance inst{kind, {}, std::nullopt, 1, 0, {}, {}};
  const Shape small{2, 2, 3, 3};
  switch (kind) {
    case Case::kConv2d: {
      const int k = s.coin(0.5) ? 3 : 1;
      inst.stride = s.integer(1, 2);
      inst.padding = k == 3 ? s.integer(0, 1) : 0;
      const int cin = s.integer(1, 3), cout = s.integer(1, 3);
      inst.leaves = {s.uniform({2, cin, 5, 5}), s.uniform({cout, cin, k, k}), s.uniform({cout})};
      break;
    }
    case Case::kRelu:
    case Case::kSigmoid:
    case Case::kSum:
    case Case::kMean:
    case Case::kGap:
      inst.leaves = {s.uniform(small, -2.0, 2.0)};
      break;
    case Case::kAdd:
    case Case::kSub:
    case Case::kMul: {
      const bool scalar_rhs = s.coin(0.25);
      inst.leaves = {s.uniform(small), s.uniform(scalar_rhs ? Shape{1} : small)};
      break;
    }
    case Case::kEMax: {
      inst.leaves = {s.uniform(small), s.uniform(small)};
      // Plant exact ties so the skip path is exercised.
      for (std::int64_t i = 0; i < inst.leaves[0].size(); ++i) {
        if (s.coin(0.15)) inst.leaves[1][i] = inst.leaves[0][i];
      }
      break;
    }
    case Case::kConcat:
      inst.leaves = {s.uniform({2, 2, 2, 3}), s.uniform({2, 3, 2, 3})};
      break;
    case Case::kLinear:
      inst.leaves = {s.uniform({3, 4}), s.uniform({2, 4}), s.uniform({2})};
      break;
    case Case::kAffine:
      inst.leaves = {s.uniform(small), s.uniform({2}), s.uniform({2})};
      break;
    case Case::kCrossEntropy: {
      inst.leaves = {s.uniform({3, 4}, -2.0, 2.0)};
      for (int i = 0; i < 3; ++i) inst.labels.push_back(s.integer(0, 3));
      break;
    }
    case Case::kMse:
    case Case::kL1:
      inst.leaves = {s.uniform({2, 3}), s.uniform({2, 3})};
      break;
    case Case::kComposite: {
      inst.leaves = {s.uniform({1, 2, 2, 2}), s.uniform({1, 2, 2, 2}), s.uniform({1, 2, 2, 2})};
      for (int i = 0; i < 3; ++i) inst.steps.push_back(static_cast<Step>(s.integer(0, 5)));
      break;
    }
  }
  return inst;
}

template <typename Scalar>
Var<Scalar> build_output(const Instance& inst, const std::vector<Var<Scalar>>& x) {
  switch (inst.kind) {
    case Case::kConv2d: return conv2d(x[0], x[1], std::optional<Var<Scalar>>(x[2]), inst.stride, inst.padding);
    case Case::kRelu: return relu(x[0]);
    case Case::kSigmoid: return sigmoid(x[0]);
    case Case::kAdd: return add(x[0], x[1]);
    case Case::kSub: return sub(x[0], x[1]);
    case Case::kMul: return mul(x[0], x[1]);
    case Case::kEMax: return emax(x[0], x[1]);
    case Case::kConcat: return concat_channels(x[0], x[1]);
    case Case::kGap: return global_avg_pool(x[0]);
    case Case::kLinear: return linear(x[0], x[1], std::optional<Var<Scalar>>(x[2]));
    case Case::kAffine: return channel_affine(x[0], x[1], x[2]);
    case Case::kSum: return sum(x[0]);
    case Case::kMean: return mean(x[0]);
    case Case::kCrossEntropy: return cross_entropy(x[0], inst.labels);
    case Case::kMse: return mse_loss(x[0], x[1]);
    case Case::kL1: return l1_loss(x[0], x[1]);
    case Case::kComposite: {
      Var<Scalar> h = x[0];
      for (std::size_t i = 0; i < inst.steps.size(); ++i) {
        const Var<Scalar>& other = x[1 + i % 2];
        switch (inst.steps[i]) {
          case Step::kRelu: h = relu(h); break;
          case Step::kSigmoid: h = sigmoid(h); break;
          case Step::kAdd: h = add(h, other); break;
          case Step::kSub: h = sub(other, h); break;
          case Step::kMul: h = mul(h, other); break;
          case Step::kEMax: h = emax(h, other); break;
        }
      }
      return h;
    }
  }
  throw std::logic_error("unhandled gradcheck case");
}

template <typename Scalar>
Var<Scalar> build_loss(const Instance& inst, Graph<Scalar>& g, const std::vector<Tensor<double>>& leaves,
                       bool trainable) {
  std::vector<Var<Scalar>> x;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    x.push_back(g.parameter("x" + std::to_string(i), leaves[i].template cast<Scalar>(), trainable));
  }
  Var<Scalar> out = build_output(inst, x);
  if (numel(out.shape()) == 1) return out;
  return sum(mul(out, g.data(inst.weights->template cast<Scalar>())));
}

double evaluate(const Instance& inst, const std::vector<Tensor<double>>& leaves) {
  Graph<double> g;
  return build_loss(inst, g, leaves, false).value().item();
}

template <typename Scalar>
std::map<std::string, Tensor<Scalar>> analytic(const Instance& inst) {
  Graph<Scalar> g;
  return g.backward(build_loss(inst, g, inst.leaves, true));
}

// Smallest distance of any relu input from zero or any emax operand pair from
// a tie, over the whole forward graph.
double kink_margin(const Instance& inst) {
  Graph<double> g;
  build_loss(inst, g, inst.leaves, false);
  double margin = std::numeric_limits<double>::infinity();
  for (NodeId id = 0; id < static_cast<NodeId>(g.size()); ++id) {
    const auto& n = g.node(id);
    if (n.kind == OpKind::kRelu) {
      margin = std::min(margin, g.value(n.inputs[0]).data().cwiseAbs().minCoeff());
    } else if (n.kind == OpKind::kEMax) {
      const auto& a = g.value(n.inputs[0]);
      const auto& b = g.value(n.inputs[1]);
      for (std::int64_t i = 0; i < a.size(); ++i) {
        margin = std::min(margin, std::abs(a[i] - detail::element(b, i)));
      }
    }
  }
  return margin;
}

// Elements whose central difference would straddle a kink.
std::vector<char> skip_mask(const Instance& inst, std::size_t leaf, double eps) {
  const auto& t = inst.leaves[leaf];
  std::vector<char> skip(static_cast<std::size_t>(t.size()), 0);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    bool near = false;
    switch (inst.kind) {
      case Case::kRelu: near = std::abs(t[i]) <= 2 * eps; break;
      case Case::kEMax:
      case Case::kL1: near = std::abs(inst.leaves[0][i] - inst.leaves[1][i]) <= 2 * eps; break;
      default: break;
    }
    skip[static_cast<std::size_t>(i)] = near;
  }
  return skip;
}

}  // namespace

const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& c : kCases) v.emplace_back(c.name);
    return v;
  }();
  return names;
}

std::vector<OpCheckResult> run_gradcheck(const std::vector<std::string>& ops, const GradCheckOptions& options) {
  std::vector<OpCheckResult> results;
  if (options.trials <= 0) return results;
  for (const auto& name : ops) {
    const auto* info = std::find_if(std::begin(kCases), std::end(kCases),
                                    [&](const CaseInfo& c) { return name == c.name; });
    if (info == std::end(kCases)) throw std::invalid_argument("unknown op for gradcheck: " + name);
    OpCheckResult r;
    r.op = name;
    Sampler sampler(options.seed + 7919ULL * static_cast<std::uint64_t>(info - std::begin(kCases)));
    int attempts = 0;
    while (r.instances < options.trials && attempts < 20 * std::max(options.trials, 1)) {
      ++attempts;
      Instance inst = make_instance(info->kind, sampler);
      {
        Graph<double> probe;
        std::vector<Var<double>> x;
        for (std::size_t i = 0; i < inst.leaves.size(); ++i) {
          x.push_back(probe.parameter("x" + std::to_string(i), inst.leaves[i], false));
        }
        const Var<double> out = build_output(inst, x);
        if (numel(out.shape()) != 1) inst.weights = sampler.uniform(out.shape());
      }
      if (info->kind == Case::kComposite && kink_margin(inst) < 50 * options.eps) {
        ++r.skipped_instances;
        continue;
      }
      const auto g32 = analytic<float>(inst);
      const auto g64 = analytic<double>(inst);
      for (std::size_t leaf = 0; leaf < inst.leaves.size(); ++leaf) {
        const std::string key = "x" + std::to_string(leaf);
        auto perturbed = [&](const Tensor<double>& at) {
          auto leaves = inst.leaves;
          leaves[leaf] = at;
          return evaluate(inst, leaves);
        };
        const Tensor<double> fd = finite_diff_grad(perturbed, inst.leaves[leaf], options.eps);
        const auto skip = skip_mask(inst, leaf, options.eps);
        // A leaf the output never reads has no entry; its gradient is zero.
        const auto a32 = g32.contains(key) ? g32.at(key) : Tensor<float>(fd.shape());
        const auto a64 = g64.contains(key) ? g64.at(key) : Tensor<double>(fd.shape());
        for (std::int64_t i = 0; i < fd.size(); ++i) {
          if (skip[static_cast<std::size_t>(i)]) {
            ++r.skipped_points;
            continue;
          }
          ++r.points;
          r.max_err32 = std::max(r.max_err32, relative_error(a32[i], fd[i]));
          r.max_err64 = std::max(r.max_err64, relative_error(a64[i], fd[i]));
        }
      }
      ++r.instances;
    }
    r.passed = r.instances >= options.trials && r.max_err32 < options.tol32 && r.max_err64 < options.tol64;
    results.push_back(r);
  }
  return results;
}

}  // namespace cst
