// SPDX-License-Identifier: Apache-2.0
#include "cst/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <cstdio>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace cst {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Typed access to one JSON object; every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    return has(key) ? required<T>(key) : fallback;
  }

  template <typename T>
  T required(const std::string& key) {
    if (!has(key)) throw ConfigError(where() + ": missing required key '" + key + "'");
    used_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string where(const std::string& key = "") const { return key.empty() ? path_ : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.contains(key)) throw ConfigError(where() + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void check_name(const std::string& name, const std::string& where) {
  if (name.empty()) throw ConfigError(where + ": empty name");
  for (char c : name) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') {
      throw ConfigError(where + ": name '" + name + "' may only use letters, digits, '-', '_' and '.'");
    }
  }
}

StrategyEntry parse_strategy_entry(const json& j, const std::string& path) {
  if (j.is_string()) {
    StrategyConfig c = parse_strategy(j.get<std::string>());
    return {c.label(), c};
  }
  Reader r(j, path);
  StrategyConfig c = parse_strategy(r.required<std::string>("kind"));
  if (r.has("k")) c.k = r.required<int>("k");
  if (r.has("gate")) c.gate = parse_gate(r.required<std::string>("gate"));
  c.r_schedule = r.get<std::vector<int>>("r", c.r_schedule);
  c.head_trainable = r.get<bool>("head_trainable", c.head_trainable);
  c.prompt_kernel = r.get<int>("prompt_kernel", c.prompt_kernel);
  const std::string name = r.get<std::string>("name", c.label());
  r.finish();
  return {name, c};
}

TaskEntry parse_task_entry(const json& j, const std::string& path) {
  TaskEntry t;
  if (j.is_string()) {
    t.spec.kind = parse_correlation(j.get<std::string>());
    t.name = to_string(t.spec.kind);
    return t;
  }
  Reader r(j, path);
  t.spec.kind = parse_correlation(r.required<std::string>("kind"));
  t.spec.classes = r.get<int>("classes", t.spec.classes);
  t.spec.train = r.get<int>("train", t.spec.train);
  t.spec.val = r.get<int>("val", t.spec.val);
  t.name = r.get<std::string>("name", to_string(t.spec.kind));
  r.finish();
  return t;
}

json memory_json(const MemoryReport& m) {
  return {{"trainable_params", m.trainable_params},         {"total_params", m.total_params},
          {"retained_train_elems", m.retained_train_elems}, {"peak_train_elems", m.peak_train_elems},
          {"retained_infer_elems", m.retained_infer_elems}, {"optimizer_state_elems", m.optimizer_state_elems}};
}

MemoryReport memory_from_json(const json& j) {
  MemoryReport m;
  m.trainable_params = j.at("trainable_params").get<std::int64_t>();
  m.total_params = j.at("total_params").get<std::int64_t>();
  m.retained_train_elems = j.at("retained_train_elems").get<std::int64_t>();
  m.peak_train_elems = j.at("peak_train_elems").get<std::int64_t>();
  m.retained_infer_elems = j.at("retained_infer_elems").get<std::int64_t>();
  m.optimizer_state_elems = j.at("optimizer_state_elems").get<std::int64_t>();
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string seconds_since(std::chrono::steady_clock::time_point t0) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f s",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return buf;
}

fs::path cell_dir(const fs::path& out, const std::string& strategy, const std::string& task) {
  return out / "cells" / (strategy + "__" + task);
}

}  // namespace

void ExperimentConfig::reseed(std::uint64_t new_seed) {
  seed = new_seed;
  source.seed = derive_seed(seed, "source");
  for (auto& t : tasks) t.spec.seed = derive_seed(seed, "task." + t.name);
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Reader r(j, "config");
  cfg.seed = r.required<std::uint64_t>("seed");

  if (r.has("backbone")) {
    Reader b(r.raw("backbone"), "config.backbone");
    cfg.backbone.n_stages = b.get<int>("n_stages", cfg.backbone.n_stages);
    cfg.backbone.blocks_per_stage = b.get<int>("blocks_per_stage", cfg.backbone.blocks_per_stage);
    cfg.backbone.stem_channels = b.get<int>("stem_channels", cfg.backbone.stem_channels);
    b.finish();
  }
  if (r.has("source")) {
    Reader s(r.raw("source"), "config.source");
    cfg.source.classes = s.get<int>("classes", cfg.source.classes);
    cfg.source.image_size = s.get<int>("image_size", cfg.source.image_size);
    cfg.source.train = s.get<int>("train", cfg.source.train);
    cfg.source.val = s.get<int>("val", cfg.source.val);
    cfg.source.latent_noise = s.get<float>("latent_noise", cfg.source.latent_noise);
    cfg.source.pixel_noise = s.get<float>("pixel_noise", cfg.source.pixel_noise);
    cfg.pretrain_epochs = s.get<int>("pretrain_epochs", cfg.pretrain_epochs);
    s.finish();
  }
  if (r.has("strategies")) {
    const json& list = r.raw("strategies");
    if (!list.is_array()) throw ConfigError("config.strategies: expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string path = "config.strategies[" + std::to_string(i) + "]";
      try {
        cfg.strategies.push_back(parse_strategy_entry(list[i], path));
      } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
      }
    }
  }
  if (r.has("tasks")) {
    const json& list = r.raw("tasks");
    if (!list.is_array()) throw ConfigError("config.tasks: expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string path = "config.tasks[" + std::to_string(i) + "]";
      try {
        cfg.tasks.push_back(parse_task_entry(list[i], path));
      } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
      }
    }
  }
  if (r.has("train")) {
    Reader t(r.raw("train"), "config.train");
    cfg.train.lr0 = t.get<double>("lr0", cfg.train.lr0);
    cfg.train.beta1 = t.get<double>("beta1", cfg.train.beta1);
    cfg.train.beta2 = t.get<double>("beta2", cfg.train.beta2);
    cfg.train.eps = t.get<double>("eps", cfg.train.eps);
    cfg.train.batch_size = t.get<int>("batch_size", cfg.train.batch_size);
    cfg.train.epochs = t.get<int>("epochs", cfg.train.epochs);
    cfg.train.loss = parse_loss(t.get<std::string>("loss", to_string(cfg.train.loss)));
    t.finish();
  }
  if (r.has("memcheck")) {
    Reader m(r.raw("memcheck"), "config.memcheck");
    cfg.memcheck_batch = m.get<int>("batch", cfg.memcheck_batch);
    m.finish();
  }
  r.finish();

  cfg.backbone.validate();
  try {
    cfg.backbone.validate_input(cfg.source.image_size, cfg.source.image_size);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config.source.image_size: ") + e.what());
  }
  cfg.train.validate();
  if (cfg.pretrain_epochs < 0) throw ConfigError("config.source.pretrain_epochs must be >= 0");
  if (cfg.memcheck_batch < 1) throw ConfigError("config.memcheck.batch must be >= 1");
  if (cfg.source.classes < 1 || cfg.source.train < 1 || cfg.source.val < 0) {
    throw ConfigError("config.source: classes and train must be >= 1");
  }
  std::set<std::string> names;
  for (const auto& s : cfg.strategies) {
    check_name(s.name, "config.strategies");
    if (!names.insert(s.name).second) throw ConfigError("config.strategies: duplicate name '" + s.name + "'");
  }
  names.clear();
  for (const auto& t : cfg.tasks) {
    check_name(t.name, "config.tasks");
    if (!names.insert(t.name).second) throw ConfigError("config.tasks: duplicate name '" + t.name + "'");
    if (t.spec.classes < 1 || t.spec.train < 1 || t.spec.val < 0) {
      throw ConfigError("config.tasks." + t.name + ": classes and train must be >= 1");
    }
    if (t.spec.kind != Correlation::kNone && t.spec.classes > cfg.source.classes) {
      throw ConfigError("config.tasks." + t.name + ": " + std::to_string(t.spec.classes) +
                        " classes requested from a source with " + std::to_string(cfg.source.classes));
    }
  }
  cfg.reseed(cfg.seed);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& cfg) {
  json strategies = json::array();
  for (const auto& s : cfg.strategies) {
    const StrategyConfig& c = s.config;
    json e = {{"name", s.name}, {"kind", c.label()}, {"head_trainable", c.head_trainable}};
    if (c.kind == StrategyKind::kCst) e["gate"] = to_string(c.gate);
    if (!c.r_schedule.empty()) e["r"] = c.r_schedule;
    if (c.kind == StrategyKind::kPrompt) e["prompt_kernel"] = c.prompt_kernel;
    strategies.push_back(e);
  }
  json tasks = json::array();
  for (const auto& t : cfg.tasks) {
    tasks.push_back({{"name", t.name},
                     {"kind", to_string(t.spec.kind)},
                     {"classes", t.spec.classes},
                     {"train", t.spec.train},
                     {"val", t.spec.val}});
  }
  return {{"seed", cfg.seed},
          {"backbone",
           {{"n_stages", cfg.backbone.n_stages},
            {"blocks_per_stage", cfg.backbone.blocks_per_stage},
            {"stem_channels", cfg.backbone.stem_channels}}},
          {"source",
           {{"classes", cfg.source.classes},
            {"image_size", cfg.source.image_size},
            {"train", cfg.source.train},
            {"val", cfg.source.val},
            {"latent_noise", cfg.source.latent_noise},
            {"pixel_noise", cfg.source.pixel_noise},
            {"pretrain_epochs", cfg.pretrain_epochs}}},
          {"strategies", strategies},
          {"tasks", tasks},
          {"train",
           {{"lr0", cfg.train.lr0},
            {"beta1", cfg.train.beta1},
            {"beta2", cfg.train.beta2},
            {"eps", cfg.train.eps},
            {"batch_size", cfg.train.batch_size},
            {"epochs", cfg.train.epochs},
            {"loss", to_string(cfg.train.loss)}}},
          {"memcheck", {{"batch", cfg.memcheck_batch}}}};
}

Backbone pretrain_backbone(const ExperimentConfig& cfg, const SourceTask& source, TrainLog* log) {
  const Backbone init = build_backbone(cfg.backbone, derive_seed(cfg.seed, "backbone"));
  const Head head = build_head(TaskKind::kClassification, cfg.backbone.channels(cfg.backbone.n_stages),
                               source.spec.classes, derive_seed(cfg.seed, "source.head"));
  ModelSpec full = apply_strategy(init, head, parse_strategy("full"), derive_seed(cfg.seed, "pretrain"));
  TrainConfig tc = cfg.train;
  tc.epochs = cfg.pretrain_epochs;
  tc.seed = derive_seed(cfg.seed, "pretrain.train");
  TrainLog l = train(full, source.data, tc);
  if (log) *log = std::move(l);
  Backbone out{cfg.backbone, {}};
  for (const auto& name : full.backbone_names) out.params.add(name, full.params.get(name).value, false);
  return out;
}

CellResult run_cell(const ExperimentConfig& cfg, const Backbone& pretrained, const StrategyEntry& strategy,
                    const TaskEntry& task, const TaskData& data) {
  const Head head = build_head(TaskKind::kClassification, cfg.backbone.channels(cfg.backbone.n_stages),
                               task.spec.classes, derive_seed(cfg.seed, "head." + task.name));
  CellResult r{apply_strategy(pretrained, head, strategy.config, derive_seed(cfg.seed, "strategy." + strategy.name)),
               {}};
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train." + strategy.name + "." + task.name);
  r.log = train(r.model, data, tc);
  return r;
}

std::vector<MemcheckRow> run_memcheck(const ExperimentConfig& cfg) {
  const Backbone bb = build_backbone(cfg.backbone, derive_seed(cfg.seed, "backbone"));
  const int classes = cfg.tasks.empty() ? 4 : cfg.tasks.front().spec.classes;
  const Head head = build_head(TaskKind::kClassification, cfg.backbone.channels(cfg.backbone.n_stages), classes,
                               derive_seed(cfg.seed, "head.memcheck"));
  const int n = cfg.memcheck_batch, hw = cfg.source.image_size;
  RealTensor input({n, cfg.backbone.in_channels, hw, hw});
  std::mt19937_64 rng(derive_seed(cfg.seed, "memcheck.input"));
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (std::int64_t i = 0; i < input.size(); ++i) input[i] = d(rng);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;

  std::vector<MemcheckRow> rows;
  for (const auto& s : cfg.strategies) {
    const ModelSpec m = apply_strategy(bb, head, s.config, derive_seed(cfg.seed, "strategy." + s.name));
    rows.push_back({s.name, predict_model(m, input.shape()), measure_retained(m, input, labels)});
  }
  return rows;
}

void run_experiment(const ExperimentConfig& cfg, const fs::path& out, std::ostream& progress) {
  if (cfg.strategies.empty() || cfg.tasks.empty()) throw ConfigError("config needs at least one strategy and task");
  fs::create_directories(out / "cells");
  write_text(out / "manifest.json", json{{"config", to_json(cfg)}}.dump(2) + "\n");

  auto t0 = std::chrono::steady_clock::now();
  const SourceTask source = make_source_task(cfg.source);
  TrainLog pre_log;
  const Backbone pretrained = pretrain_backbone(cfg, source, &pre_log);
  fs::create_directories(out / "pretrain");
  write_text(out / "pretrain" / "trainlog.csv", trainlog_csv(pre_log));
  write_checkpoint(out / "pretrain" / "backbone.ckpt", pretrained.params, pretrained.parameter_names());
  progress << "pretrain: " << cfg.pretrain_epochs << " epochs";
  if (!pre_log.epochs.empty()) progress << ", source val accuracy " << pre_log.epochs.back().val_accuracy;
  progress << " (" << seconds_since(t0) << ")\n" << std::flush;

  for (const auto& task : cfg.tasks) {
    const TaskData data = make_target_task(task.spec, source);
    for (const auto& strategy : cfg.strategies) {
      t0 = std::chrono::steady_clock::now();
      const CellResult r = run_cell(cfg, pretrained, strategy, task, data);
      const fs::path dir = cell_dir(out, strategy.name, task.name);
      fs::create_directories(dir);
      write_text(dir / "trainlog.csv", trainlog_csv(r.log));
      json cell = {{"strategy", strategy.name}, {"task", task.name}};
      if (r.log.memory) cell["memory"] = memory_json(*r.log.memory);
      write_text(dir / "cell.json", cell.dump(2) + "\n");
      std::vector<std::string> saved = r.model.trainable_names();
      for (const auto& name : r.model.extra_names) {
        if (std::find(saved.begin(), saved.end(), name) == saved.end()) saved.push_back(name);
      }
      write_checkpoint(dir / "checkpoint.ckpt", r.model.params, saved);
      progress << strategy.name << " / " << task.name;
      if (!r.log.epochs.empty()) {
        progress << ": val loss " << r.log.epochs.back().val_loss << ", val accuracy "
                 << r.log.epochs.back().val_accuracy;
      }
      progress << " (" << seconds_since(t0) << ")\n" << std::flush;
    }
  }
  write_report(out);
}

SummaryTables build_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("no run directory at " + dir.string());
  const fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) throw std::runtime_error("no manifest.json in " + dir.string());
  ExperimentConfig cfg;
  try {
    cfg = parse_config(json::parse(read_text(manifest)).at("config"));
  } catch (const json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }

  std::vector<std::string> columns;
  for (const auto& t : cfg.tasks) {
    columns.push_back(t.name + "_val_loss");
    columns.push_back(t.name + "_val_acc");
  }
  std::vector<ReportRow> rows;
  for (const auto& s : cfg.strategies) {
    ReportRow row{s.name, std::nullopt, {}};
    for (const auto& t : cfg.tasks) {
      const fs::path cell = cell_dir(dir, s.name, t.name);
      std::optional<double> loss, acc;
      if (fs::exists(cell / "trainlog.csv")) {
        const auto epochs = parse_trainlog_csv(read_text(cell / "trainlog.csv"));
        if (!epochs.empty()) {
          loss = epochs.back().val_loss;
          acc = epochs.back().val_accuracy;
        }
      }
      if (!row.memory && fs::exists(cell / "cell.json")) {
        const json j = json::parse(read_text(cell / "cell.json"));
        if (j.contains("memory")) row.memory = memory_from_json(j.at("memory"));
      }
      row.metrics.push_back(loss);
      row.metrics.push_back(acc);
    }
    rows.push_back(std::move(row));
  }
  return {report_csv(rows, columns), report_markdown(rows, columns)};
}

SummaryTables write_report(const fs::path& dir) {
  SummaryTables t = build_report(dir);
  write_text(dir / "summary.csv", t.csv);
  write_text(dir / "summary.md", t.markdown);
  return t;
}

}  // namespace cst
