// SPDX-License-Identifier: Apache-2.0
#include "cst/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace cst {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCrossEntropy: return "cross_entropy";
    case LossKind::kMse: return "mse";
    case LossKind::kL1: return "l1";
  }
  return "?";
}

LossKind parse_loss(const std::string& text) {
  for (LossKind k : {LossKind::kCrossEntropy, LossKind::kMse, LossKind::kL1}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("unknown loss '" + text + "' (expected cross_entropy, mse or l1)");
}

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in (0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
}

double cosine_lr(std::int64_t t, std::int64_t T, double lr0) {
  if (T <= 0 || t < 0 || t > T) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  }
  if (2 * t == T) return lr0 * 0.5;
  if (t == T) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(T)));
}

void adam_step(ParameterStore& params, const std::map<std::string, RealTensor>& grads, AdamState& state, double lr,
               const TrainConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const auto c1 = static_cast<float>(1 - cfg.beta1), c2 = static_cast<float>(1 - cfg.beta2);
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    const auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    const RealTensor& g = it->second;
    if (g.shape() != p.value.shape()) {
      throw ShapeError("gradient for " + p.name + " has shape " + to_string(g.shape()) + ", parameter has " +
                       to_string(p.value.shape()));
    }
    auto [mi, fresh] = state.m.try_emplace(p.name, RealTensor(p.value.shape()));
    auto& v = state.v.try_emplace(p.name, RealTensor(p.value.shape())).first->second;
    auto& m = mi->second;
    m.data() = b1 * m.data() + c1 * g.data();
    v.data() = (b2 * v.data().array() + c2 * g.data().array().square()).matrix();
    const auto mhat = m.data().array().cast<double>() / bc1;
    const auto vhat = v.data().array().cast<double>() / bc2;
    p.value.data() =
        (p.value.data().array().cast<double>() - lr * mhat / (vhat.sqrt() + cfg.eps)).cast<float>().matrix();
  }
}

RealVar task_loss(LossKind kind, RealVar output, const std::vector<int>& labels) {
  if (kind == LossKind::kCrossEntropy) return cross_entropy(output, labels);
  const Shape& s = output.shape();
  if (s.size() != 2 || s[0] != static_cast<int>(labels.size())) {
    throw ShapeError("regression loss expects N x K outputs for " + std::to_string(labels.size()) + " labels");
  }
  RealTensor target(s);
  for (int i = 0; i < s[0]; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= s[1]) throw ShapeError("label " + std::to_string(c) + " outside " + std::to_string(s[1]) + " outputs");
    target[static_cast<std::int64_t>(i) * s[1] + c] = 1;
  }
  const RealVar t = output.graph().data(std::move(target));
  return kind == LossKind::kMse ? mse_loss(output, t) : l1_loss(output, t);
}

RealTensor gather_images(const Dataset& data, const std::vector<int>& order, int begin, int count) {
  const Shape& s = data.images.shape();
  const std::int64_t per = numel(s) / s[0];
  RealTensor batch({count, s[1], s[2], s[3]});
  for (int i = 0; i < count; ++i) {
    const int src = order[static_cast<std::size_t>(begin + i)];
    batch.data().segment(i * per, per) = data.images.data().segment(src * per, per);
  }
  return batch;
}

EvalResult evaluate(const ModelSpec& model, const Dataset& data, LossKind loss, int batch_size) {
  EvalResult r;
  const int n = data.size();
  if (n == 0) return r;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double total = 0;
  int correct = 0;
  for (int begin = 0; begin < n; begin += batch_size) {
    const int count = std::min(batch_size, n - begin);
    const std::vector<int> labels(data.labels.begin() + begin, data.labels.begin() + begin + count);
    Graph<Real> g;
    const ModelOutput out = forward_model(model, g.data(gather_images(data, order, begin, count)));
    total += static_cast<double>(task_loss(loss, out.output, labels).value().item()) * count;
    const RealTensor& logits = out.output.value();
    const int k = logits.dim(1);
    for (int i = 0; i < count; ++i) {
      const float* row = logits.raw() + static_cast<std::int64_t>(i) * k;
      const int arg = static_cast<int>(std::max_element(row, row + k) - row);
      correct += arg == labels[static_cast<std::size_t>(i)];
    }
  }
  r.loss = total / n;
  r.accuracy = static_cast<double>(correct) / n;
  return r;
}

TrainLog train(ModelSpec& model, const TaskData& data, const TrainConfig& cfg) {
  cfg.validate();
  TrainLog log;
  if (cfg.epochs == 0) return log;
  const auto start = std::chrono::steady_clock::now();
  const int n = data.train.size();
  if (n == 0) throw ConfigError("training set is empty");
  const int steps = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t T = static_cast<std::int64_t>(steps) * cfg.epochs;
  const auto names = model.trainable_names();
  const std::set<std::string> mask(names.begin(), names.end());

  AdamState state;
  std::mt19937_64 rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (int s = 0; s < steps; ++s) {
      const int begin = s * cfg.batch_size;
      const int count = std::min(cfg.batch_size, n - begin);
      std::vector<int> labels(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) labels[static_cast<std::size_t>(i)] = data.train.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(begin + i)])];

      Graph<Real> g;
      const ModelOutput out = forward_model(model, g.data(gather_images(data.train, order, begin, count)));
      const RealVar loss = task_loss(cfg.loss, out.output, labels);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(s) + " (" + model.strategy.label() + ")");
      }
      sum += value * count;
      if (t == 0) log.memory = predict_retained(extract_structure(g), out.output.id(), loss.id(), mask);
      g.prepare_backward(loss);
      g.release_unretained();
      if (t == 0 && alive_elems(g) != log.memory->retained_train_elems) {
        throw std::logic_error("retained activations differ from the prediction");
      }
      const auto grads = g.backward(loss);
      const double lr = cosine_lr(t, T, cfg.lr0);
      adam_step(model.params, grads, state, lr, cfg);
      log.lr_trace.push_back(lr);
      ++t;
    }
    const EvalResult ev = evaluate(model, data.val, cfg.loss);
    log.epochs.push_back({epoch + 1, sum / n, ev.loss, ev.accuracy, log.lr_trace.back()});
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string trainlog_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_accuracy,lr\n";
  for (const auto& e : log.epochs) {
    os << e.epoch << ',' << exact(e.train_loss) << ',' << exact(e.val_loss) << ',' << exact(e.val_accuracy) << ','
       << exact(e.lr) << '\n';
  }
  return os.str();
}

std::vector<EpochLog> parse_trainlog_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "epoch,train_loss,val_loss,val_accuracy,lr") {
    throw std::runtime_error("trainlog: missing or unexpected header");
  }
  std::vector<EpochLog> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[5];
    for (auto& field : f) {
      if (!std::getline(ls, field, ',')) throw std::runtime_error("trainlog: short row '" + line + "'");
    }
    try {
      rows.push_back({std::stoi(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    } catch (const std::logic_error&) {
      throw std::runtime_error("trainlog: malformed row '" + line + "'");
    }
  }
  return rows;
}

void write_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                      const std::vector<std::string>& names) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << "cst-checkpoint 1\n";
  for (const auto& name : names) {
    const Parameter& p = params.get(name);
    os << "param " << p.name << ' ';
    for (std::size_t i = 0; i < p.value.shape().size(); ++i) os << (i ? "x" : "") << p.value.shape()[i];
    os << " trainable=" << (p.trainable ? 1 : 0) << '\n';
  }
  os << "end\n";
  for (const auto& name : names) write_tensor(os, params.get(name).value);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ParameterStore read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "cst-checkpoint 1") {
    throw std::runtime_error(path.string() + ": not a checkpoint");
  }
  struct Entry {
    std::string name;
    Shape shape;
    bool trainable;
  };
  std::vector<Entry> entries;
  while (std::getline(is, line) && line != "end") {
    std::istringstream ls(line);
    std::string tag, name, dims, flag;
    if (!(ls >> tag >> name >> dims >> flag) || tag != "param" || !flag.starts_with("trainable=")) {
      throw std::runtime_error(path.string() + ": malformed header line '" + line + "'");
    }
    Shape shape;
    std::istringstream ds(dims);
    for (std::string d; std::getline(ds, d, 'x');) shape.push_back(std::stoi(d));
    entries.push_back({name, shape, flag == "trainable=1"});
  }
  if (line != "end") throw std::runtime_error(path.string() + ": header not terminated");
  ParameterStore ps;
  for (const auto& e : entries) {
    RealTensor t = read_tensor(is);
    if (t.shape() != e.shape) throw std::runtime_error(path.string() + ": shape mismatch for " + e.name);
    ps.add(e.name, std::move(t), e.trainable);
  }
  return ps;
}

}  // namespace cst
