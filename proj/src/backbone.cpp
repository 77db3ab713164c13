// SPDX-License-Identifier: Apache-2.0
#include "cst/backbone.hpp"

#include <cmath>
#include <random>

#include "cst/ops.hpp"

namespace cst {

Parameter& ParameterStore::add(std::string name, RealTensor value, bool trainable) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(value), trainable});
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

std::int64_t ParameterStore::count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::int64_t ParameterStore::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.trainable ? p.value.size() : 0;
  return n;
}

void ParameterStore::set_trainable(bool trainable) {
  for (auto& p : params_) p.trainable = trainable;
}

void ParameterStore::merge(const ParameterStore& other) {
  for (const auto& p : other.params_) add(p.name, p.value, p.trainable);
}

RealVar ParameterStore::var(Graph<Real>& graph, const std::string& name) const {
  const Parameter& p = get(name);
  return graph.parameter(p.name, Graph<Real>::borrow(p.value), p.trainable);
}

std::uint64_t ParameterStore::checksum(const std::vector<std::string>& names) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& name : names) {
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h = cst::checksum(get(name).value, h);
  }
  return h;
}

void BackboneSpec::validate() const {
  if (n_stages < 1) throw ConfigError("backbone needs n_stages >= 1");
  if (blocks_per_stage < 1) throw ConfigError("backbone needs blocks_per_stage >= 1");
  if (stem_channels < 1 || in_channels < 1) throw ConfigError("backbone channel counts must be positive");
  if (n_stages > 8) throw ConfigError("backbone supports at most 8 stages");
}

void BackboneSpec::validate_input(int height, int width) const {
  const int factor = 1 << (n_stages + 1);
  if (height < factor || width < factor || height % factor != 0 || width % factor != 0) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) + " is too small for " +
                     std::to_string(n_stages) + " stride-2 stages plus stem (needs multiples of " +
                     std::to_string(factor) + ")");
  }
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

RealTensor he_normal(const Shape& shape, int fan_in, std::uint64_t seed) {
  RealTensor t(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(d(rng));
  return t;
}

namespace {

std::string stage_prefix(int stage) { return "backbone.stage" + std::to_string(stage); }

std::string block_prefix(int stage, int block) {
  return stage_prefix(stage) + ".block" + std::to_string(block);
}

void add_conv(ParameterStore& ps, const std::string& prefix, int cout, int cin, int k, std::uint64_t seed) {
  const std::string name = prefix + ".weight";
  ps.add(name, he_normal({cout, cin, k, k}, cin * k * k, derive_seed(seed, name)));
}

void add_affine(ParameterStore& ps, const std::string& prefix, int c, Real scale) {
  ps.add(prefix + ".scale", RealTensor::full({c}, scale));
  ps.add(prefix + ".shift", RealTensor({c}));
}

RealVar conv(Graph<Real>& g, const ParameterStore& ps, const BackboneHooks& hooks, const std::string& prefix,
             RealVar x, int stride, int padding) {
  std::optional<RealVar> bias;
  if (hooks.conv_bias) bias = hooks.conv_bias(prefix);
  return conv2d(x, ps.var(g, prefix + ".weight"), bias, stride, padding);
}

RealVar affine(Graph<Real>& g, const ParameterStore& ps, const std::string& prefix, RealVar x) {
  return channel_affine(x, ps.var(g, prefix + ".scale"), ps.var(g, prefix + ".shift"));
}

}  // namespace

std::vector<std::string> Backbone::conv_names() const {
  std::vector<std::string> names{"backbone.stem.conv"};
  for (int s = 1; s <= spec.n_stages; ++s) {
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      names.push_back(p + ".conv1");
      names.push_back(p + ".conv2");
      if (b == 0) names.push_back(p + ".proj");
    }
  }
  return names;
}

std::vector<std::string> Backbone::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& p : params.all()) names.push_back(p.name);
  return names;
}

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Backbone bb{spec, {}};
  auto& ps = bb.params;
  add_conv(ps, "backbone.stem.conv", spec.channels(0), spec.in_channels, 3, seed);
  add_affine(ps, "backbone.stem.affine", spec.channels(0), 1);
  for (int s = 1; s <= spec.n_stages; ++s) {
    const int cin = spec.channels(s - 1), cout = spec.channels(s);
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      add_conv(ps, p + ".conv1", cout, b == 0 ? cin : cout, 3, seed);
      add_affine(ps, p + ".affine1", cout, 1);
      add_conv(ps, p + ".conv2", cout, cout, 3, seed);
      add_affine(ps, p + ".affine2", cout, 0);
      if (b == 0) {
        add_conv(ps, p + ".proj", cout, cin, 1, seed);
        add_affine(ps, p + ".proj_affine", cout, 1);
      }
    }
  }
  return bb;
}

BackboneOutput forward_backbone(const BackboneSpec& spec, const ParameterStore& ps, RealVar input,
                                const BackboneHooks& hooks) {
  const Shape& xs = input.shape();
  if (xs.size() != 4 || xs[1] != spec.in_channels) {
    throw ShapeError("backbone expects N x " + std::to_string(spec.in_channels) + " x H x W input, got " +
                     to_string(xs));
  }
  spec.validate_input(xs[2], xs[3]);
  Graph<Real>& g = input.graph();

  BackboneOutput out;
  RealVar x = hooks.before_stem ? hooks.before_stem(input) : input;
  x = relu(affine(g, ps, "backbone.stem.affine", conv(g, ps, hooks, "backbone.stem.conv", x, 2, 1)));
  out.acts.L.push_back(x);
  for (int s = 1; s <= spec.n_stages; ++s) {
    if (hooks.after_stage && s > 1) x = hooks.after_stage(s - 1, x);
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      const int stride = b == 0 ? 2 : 1;
      RealVar h = relu(affine(g, ps, p + ".affine1", conv(g, ps, hooks, p + ".conv1", x, stride, 1)));
      h = affine(g, ps, p + ".affine2", conv(g, ps, hooks, p + ".conv2", h, 1, 1));
      const RealVar shortcut =
          b == 0 ? affine(g, ps, p + ".proj_affine", conv(g, ps, hooks, p + ".proj", x, stride, 0)) : x;
      x = relu(add(h, shortcut));
    }
    out.acts.L.push_back(x);
  }
  out.top = hooks.after_stage ? hooks.after_stage(spec.n_stages, x) : x;
  return out;
}

Head build_head(TaskKind task, int in_features, int out_dim, std::uint64_t seed) {
  if (out_dim < 1) throw ConfigError("head out_dim must be >= 1");
  if (in_features < 1) throw ConfigError("head in_features must be >= 1");
  Head h{{task, in_features, out_dim}, {}};
  RealTensor w = he_normal({out_dim, in_features}, in_features, derive_seed(seed, "head.fc.weight"));
  w.data() *= Real(0.5);
  h.params.add("head.fc.weight", std::move(w));
  h.params.add("head.fc.bias", RealTensor({out_dim}));
  return h;
}

RealVar forward_head(const ParameterStore& ps, RealVar feature) {
  Graph<Real>& g = feature.graph();
  return linear(global_avg_pool(feature), ps.var(g, "head.fc.weight"), ps.var(g, "head.fc.bias"));
}

}  // namespace cst
