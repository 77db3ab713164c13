// SPDX-License-Identifier: Apache-2.0
#include "cst/strategies.hpp"

#include <algorithm>

namespace cst {

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kFull: return "full";
    case StrategyKind::kFrozenK: return "frozen";
    case StrategyKind::kBias: return "bias";
    case StrategyKind::kPrompt: return "prompt";
    case StrategyKind::kAdapter: return "adapter";
    case StrategyKind::kLst: return "lst";
    case StrategyKind::kCst: return "cst";
  }
  return "?";
}

std::string to_string(GateKind kind) {
  switch (kind) {
    case GateKind::kCM: return "cm";
    case GateKind::kDW: return "dw";
    case GateKind::kBA: return "ba";
    case GateKind::kMTC: return "mtc";
  }
  return "?";
}

GateKind parse_gate(const std::string& text) {
  for (GateKind g : {GateKind::kCM, GateKind::kDW, GateKind::kBA, GateKind::kMTC}) {
    if (text == to_string(g)) return g;
  }
  throw ConfigError("unknown gate '" + text + "' (expected cm, dw, ba or mtc)");
}

std::string StrategyConfig::label() const {
  if (kind == StrategyKind::kFrozenK) return "frozen" + std::to_string(k);
  if (kind == StrategyKind::kCst && gate != GateKind::kMTC) return "cst-" + to_string(gate);
  return to_string(kind);
}

StrategyConfig parse_strategy(const std::string& label) {
  StrategyConfig cfg;
  if (label.starts_with("frozen")) {
    const std::string digits = label.substr(6);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ConfigError("frozen strategy needs a stage count, e.g. frozen2; got '" + label + "'");
    }
    cfg.kind = StrategyKind::kFrozenK;
    cfg.k = std::stoi(digits);
    return cfg;
  }
  if (label.starts_with("cst-")) {
    cfg.kind = StrategyKind::kCst;
    cfg.gate = parse_gate(label.substr(4));
    return cfg;
  }
  for (StrategyKind k : {StrategyKind::kFull, StrategyKind::kBias, StrategyKind::kPrompt, StrategyKind::kAdapter,
                         StrategyKind::kLst, StrategyKind::kCst}) {
    if (label == to_string(k)) {
      cfg.kind = k;
      return cfg;
    }
  }
  throw ConfigError("unknown strategy '" + label + "'");
}

std::vector<int> default_r_schedule(int n_stages) {
  std::vector<int> r(static_cast<std::size_t>(n_stages));
  for (int i = 0; i < n_stages; ++i) r[static_cast<std::size_t>(i)] = 2 * i < n_stages ? 4 : 8;
  return r;
}

std::vector<std::string> ModelSpec::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& p : params.all()) {
    if (p.trainable) names.push_back(p.name);
  }
  return names;
}

namespace {

std::string stage(int s) { return "stage" + std::to_string(s); }

// Builds extra modules into one store with deterministic per-name seeds.
class ModuleBuilder {
 public:
  ModuleBuilder(ParameterStore& ps, std::vector<std::string>& names, std::uint64_t seed)
      : ps_(ps), names_(names), seed_(seed) {}

  void conv(const std::string& prefix, int cout, int cin, int k, bool zero = false, Real bias = 0) {
    const std::string w = prefix + ".weight";
    add(w, zero ? RealTensor({cout, cin, k, k}) : he_normal({cout, cin, k, k}, cin * k * k, derive_seed(seed_, w)));
    add(prefix + ".bias", RealTensor::full({cout}, bias));
  }

  void affine(const std::string& prefix, int c, Real scale) {
    add(prefix + ".scale", RealTensor::full({c}, scale));
    add(prefix + ".shift", RealTensor({c}));
  }

  void add(const std::string& name, RealTensor value) {
    ps_.add(name, std::move(value), true);
    names_.push_back(name);
  }

  std::uint64_t seed(const std::string& name) const { return derive_seed(seed_, name); }

 private:
  ParameterStore& ps_;
  std::vector<std::string>& names_;
  std::uint64_t seed_;
};

RealTensor dirac(int channels, int k) {
  RealTensor w({channels, channels, k, k});
  for (int c = 0; c < channels; ++c) w.at(c, c, k / 2, k / 2) = 1;
  return w;
}

bool backbone_trainable(const StrategyConfig& cfg, int n, const std::string& name) {
  switch (cfg.kind) {
    case StrategyKind::kFull:
      return true;
    case StrategyKind::kFrozenK: {
      if (name.starts_with("backbone.stem.")) return false;
      const int frozen = std::min(cfg.k, n);
      for (int s = 1; s <= frozen; ++s) {
        if (name.starts_with("backbone." + stage(s) + ".")) return false;
      }
      return true;
    }
    default:
      return false;
  }
}

// Stage s's factor must divide channels(s - offset): the stage output for
// adapters and ladders, the side layer's input for CST.
void check_r_schedule(const BackboneSpec& spec, const std::vector<int>& r, int offset) {
  if (static_cast<int>(r.size()) != spec.n_stages) {
    throw ConfigError("r_schedule has " + std::to_string(r.size()) + " entries, backbone has " +
                      std::to_string(spec.n_stages) + " stages");
  }
  for (int s = 1; s <= spec.n_stages; ++s) {
    const int ri = r[static_cast<std::size_t>(s - 1)];
    const int c = spec.channels(s - offset);
    if (ri < 1 || c % ri != 0) {
      throw ConfigError("r = " + std::to_string(ri) + " does not divide the " + std::to_string(c) +
                        " channels reduced for stage " + std::to_string(s));
    }
  }
}

void build_adapter(ModuleBuilder& b, const BackboneSpec& spec, const std::vector<int>& r) {
  for (int s = 1; s <= spec.n_stages; ++s) {
    const int c = spec.channels(s), w = c / r[static_cast<std::size_t>(s - 1)];
    const std::string p = "adapter." + stage(s);
    b.conv(p + ".down", w, c, 1);
    b.conv(p + ".mid", w, w, 3);
    b.conv(p + ".up", c, w, 1, true);
  }
}

void build_lst(ModuleBuilder& b, const BackboneSpec& spec, const std::vector<int>& r) {
  const int n = spec.n_stages;
  auto width = [&](int s) { return spec.channels(s) / r[static_cast<std::size_t>(s - 1)]; };
  for (int s = 1; s <= n; ++s) {
    const int w = width(s);
    const std::string p = "lst." + stage(s);
    b.conv(p + ".tap", w, spec.channels(s), 1);
    if (s > 1) {
      b.conv(p + ".down", w, width(s - 1), 3);
      b.add(p + ".mix", RealTensor({1}));
    }
    for (int j = 0; j < spec.blocks_per_stage; ++j) {
      const std::string q = p + ".block" + std::to_string(j);
      b.conv(q + ".conv1", w, w, 3);
      b.affine(q + ".affine1", w, 1);
      b.conv(q + ".conv2", w, w, 3);
      b.affine(q + ".affine2", w, 0);
    }
  }
  b.conv("lst.expand", spec.channels(n), width(n), 1, true);
}

void build_cst(ModuleBuilder& b, const BackboneSpec& spec, const std::vector<int>& r, GateKind gate) {
  // S = 1 is the neutral side output for MTC; the fusion gates are neutral at S = 0.
  const Real neutral = gate == GateKind::kMTC ? Real(1) : Real(0);
  for (int i = 0; i < spec.n_stages; ++i) {
    const int cin = spec.channels(i), cout = spec.channels(i + 1);
    const int w = cin / r[static_cast<std::size_t>(i)];
    const std::string p = "side.layer" + std::to_string(i);
    b.conv(p + ".shrink", w, cin, 1);
    b.conv(p + ".mid", w, w, 3);
    b.conv(p + ".expand", cout, w, 1, true, neutral);
  }
  for (int s = 1; s <= spec.n_stages; ++s) {
    const int c = spec.channels(s);
    const std::string p = "gate." + stage(s);
    if (gate == GateKind::kCM) {
      RealTensor w({c, 2 * c, 3, 3});
      const RealTensor id = dirac(c, 3);
      const RealTensor side = he_normal({c, c, 3, 3}, c * 9, b.seed(p + ".compress.weight"));
      for (int o = 0; o < c; ++o) {
        for (int i = 0; i < c; ++i) {
          for (int y = 0; y < 3; ++y) {
            for (int x = 0; x < 3; ++x) {
              w.at(o, i, y, x) = id.at(o, i, y, x);
              w.at(o, c + i, y, x) = side.at(o, i, y, x);
            }
          }
        }
      }
      b.add(p + ".compress.weight", std::move(w));
      b.add(p + ".compress.bias", RealTensor({c}));
    } else if (gate == GateKind::kDW) {
      b.add(p + ".alpha", RealTensor({1}));
    }
  }
}

RealVar conv_b(Graph<Real>& g, const ParameterStore& ps, const std::string& prefix, RealVar x, int stride,
               int padding) {
  return conv2d(x, ps.var(g, prefix + ".weight"), ps.var(g, prefix + ".bias"), stride, padding);
}

RealVar affine(Graph<Real>& g, const ParameterStore& ps, const std::string& prefix, RealVar x) {
  return channel_affine(x, ps.var(g, prefix + ".scale"), ps.var(g, prefix + ".shift"));
}

RealVar adapter_forward(Graph<Real>& g, const ParameterStore& ps, int s, RealVar x) {
  const std::string p = "adapter." + stage(s);
  RealVar h = relu(conv_b(g, ps, p + ".down", x, 1, 0));
  h = relu(conv_b(g, ps, p + ".mid", h, 1, 1));
  return add(x, conv_b(g, ps, p + ".up", h, 1, 0));
}

RealVar lst_forward(Graph<Real>& g, const ParameterStore& ps, const BackboneSpec& spec,
                    const std::vector<RealVar>& L) {
  RealVar h;
  const RealVar one = g.data(RealTensor::scalar(1));
  for (int s = 1; s <= spec.n_stages; ++s) {
    const std::string p = "lst." + stage(s);
    RealVar x = conv_b(g, ps, p + ".tap", L[static_cast<std::size_t>(s)], 1, 0);
    if (s > 1) {
      const RealVar mu = sigmoid(ps.var(g, p + ".mix"));
      x = add(mul(x, mu), mul(conv_b(g, ps, p + ".down", h, 2, 1), sub(one, mu)));
    }
    for (int j = 0; j < spec.blocks_per_stage; ++j) {
      const std::string q = p + ".block" + std::to_string(j);
      RealVar t = relu(affine(g, ps, q + ".affine1", conv_b(g, ps, q + ".conv1", x, 1, 1)));
      t = affine(g, ps, q + ".affine2", conv_b(g, ps, q + ".conv2", t, 1, 1));
      x = relu(add(t, x));
    }
    h = x;
  }
  return add(L.back(), conv_b(g, ps, "lst.expand", h, 1, 0));
}

RealVar side_layer(Graph<Real>& g, const ParameterStore& ps, int i, RealVar x) {
  const std::string p = "side.layer" + std::to_string(i);
  RealVar h = relu(conv_b(g, ps, p + ".shrink", x, 1, 0));
  h = relu(conv_b(g, ps, p + ".mid", h, 2, 1));
  return conv_b(g, ps, p + ".expand", h, 1, 0);
}

}  // namespace

ModelSpec apply_strategy(const Backbone& backbone, const Head& head, const StrategyConfig& cfg, std::uint64_t seed) {
  const BackboneSpec& spec = backbone.spec;
  spec.validate();
  const int n = spec.n_stages;
  if (head.spec.in_features != spec.channels(n)) {
    throw ConfigError("head expects " + std::to_string(head.spec.in_features) + " features, backbone emits " +
                      std::to_string(spec.channels(n)));
  }
  if (cfg.kind == StrategyKind::kFrozenK && (cfg.k < 0 || cfg.k > n + 1)) {
    throw ConfigError("frozen_k needs 0 <= k <= " + std::to_string(n + 1) + ", got " + std::to_string(cfg.k));
  }
  if (cfg.kind == StrategyKind::kPrompt && (cfg.prompt_kernel < 1 || cfg.prompt_kernel % 2 == 0)) {
    throw ConfigError("prompt kernel must be odd and positive");
  }
  const std::vector<int> r = cfg.r_schedule.empty() ? default_r_schedule(n) : cfg.r_schedule;
  if (cfg.kind == StrategyKind::kAdapter || cfg.kind == StrategyKind::kLst || cfg.kind == StrategyKind::kCst) {
    check_r_schedule(spec, r, cfg.kind == StrategyKind::kCst ? 1 : 0);
  }

  ModelSpec m;
  m.backbone = spec;
  m.head = head.spec;
  m.strategy = cfg;
  m.strategy.r_schedule = r;
  for (const auto& p : backbone.params.all()) {
    m.params.add(p.name, p.value, backbone_trainable(cfg, n, p.name));
    m.backbone_names.push_back(p.name);
  }

  ModuleBuilder b(m.params, m.extra_names, seed);
  switch (cfg.kind) {
    case StrategyKind::kBias:
      for (const auto& conv : backbone.conv_names()) {
        const int cout = backbone.params.get(conv + ".weight").value.dim(0);
        b.add(conv + ".bias", RealTensor({cout}));
      }
      break;
    case StrategyKind::kPrompt:
      b.add("prompt.conv.weight", dirac(spec.in_channels, cfg.prompt_kernel));
      break;
    case StrategyKind::kAdapter:
      build_adapter(b, spec, r);
      break;
    case StrategyKind::kLst:
      build_lst(b, spec, r);
      break;
    case StrategyKind::kCst:
      build_cst(b, spec, r, cfg.gate);
      break;
    default:
      break;
  }

  for (const auto& p : head.params.all()) {
    m.params.add(p.name, p.value, cfg.head_trainable);
    m.head_names.push_back(p.name);
  }
  return m;
}

ModelOutput forward_model(const ModelSpec& m, RealVar input) {
  Graph<Real>& g = input.graph();
  const ParameterStore& ps = m.params;
  const StrategyConfig& cfg = m.strategy;

  BackboneHooks hooks;
  if (cfg.kind == StrategyKind::kBias) {
    hooks.conv_bias = [&](const std::string& conv) -> std::optional<RealVar> { return ps.var(g, conv + ".bias"); };
  } else if (cfg.kind == StrategyKind::kPrompt) {
    hooks.before_stem = [&](RealVar x) {
      return conv2d(x, ps.var(g, "prompt.conv.weight"), std::nullopt, 1, cfg.prompt_kernel / 2);
    };
  } else if (cfg.kind == StrategyKind::kAdapter) {
    hooks.after_stage = [&](int s, RealVar x) { return adapter_forward(g, ps, s, x); };
  }

  BackboneOutput bo = forward_backbone(m.backbone, ps, input, hooks);
  ModelOutput out{{}, std::move(bo.acts)};
  RealVar top = bo.top;
  if (cfg.kind == StrategyKind::kLst) {
    top = lst_forward(g, ps, m.backbone, out.acts.L);
  } else if (cfg.kind == StrategyKind::kCst) {
    for (int i = 0; i < m.backbone.n_stages; ++i) {
      const RealVar x = i == 0 ? out.acts.L[0] : out.acts.G.back();
      out.acts.S.push_back(side_layer(g, ps, i, x));
      const std::string p = "gate." + stage(i + 1);
      GateParams<Real> gp;
      if (cfg.gate == GateKind::kCM) {
        gp.weight = ps.var(g, p + ".compress.weight");
        gp.bias = ps.var(g, p + ".compress.bias");
      } else if (cfg.gate == GateKind::kDW) {
        gp.alpha = ps.var(g, p + ".alpha");
      }
      out.acts.G.push_back(gate_apply(cfg.gate, out.acts.L[static_cast<std::size_t>(i + 1)], out.acts.S.back(), gp));
    }
    top = out.acts.G.back();
  }
  out.output = forward_head(ps, top);
  return out;
}

}  // namespace cst
