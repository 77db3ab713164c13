// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/memory.hpp"
#include "cst/train.hpp"

namespace cst {

struct StrategyEntry {
  std::string name;  ///< row label; defaults to config.label()
  StrategyConfig config;
};

struct TaskEntry {
  std::string name;  ///< column prefix; defaults to the kind
  TaskSpec spec;     ///< spec.seed is derived from the experiment seed
};

/// Everything a run needs. Parsed from JSON; see README for the schema.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  BackboneSpec backbone;
  SourceSpec source;  ///< source.seed is derived from the experiment seed
  int pretrain_epochs = 4;
  std::vector<StrategyEntry> strategies;
  std::vector<TaskEntry> tasks;
  TrainConfig train;
  int memcheck_batch = 1;

  /// Re-derives the source and task seeds from `seed`.
  void reseed(std::uint64_t new_seed);
};

/// Throws ConfigError naming the offending key. Unknown keys are errors.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Trains `full` on the source task and returns the frozen backbone.
Backbone pretrain_backbone(const ExperimentConfig& cfg, const SourceTask& source, TrainLog* log = nullptr);

struct CellResult {
  ModelSpec model;
  TrainLog log;
};

/// One (strategy, task) cell: fresh head, strategy modules, training on `data`.
CellResult run_cell(const ExperimentConfig& cfg, const Backbone& pretrained, const StrategyEntry& strategy,
                    const TaskEntry& task, const TaskData& data);

struct MemcheckRow {
  std::string strategy;
  MemoryReport predicted;
  MemoryReport measured;
};

/// Predicted and measured reports for each strategy on one random batch,
/// using a freshly initialized backbone.
std::vector<MemcheckRow> run_memcheck(const ExperimentConfig& cfg);

/// Trains every cell and writes manifest.json, per-cell trainlog.csv,
/// cell.json and checkpoint, then the summary via `write_report`.
/// Progress lines go to `progress`.
void run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& progress);

struct SummaryTables {
  std::string csv;
  std::string markdown;
};

/// Rebuilds the summary from a run directory. Missing cells become gaps.
/// Throws std::runtime_error when the directory or manifest is missing.
SummaryTables build_report(const std::filesystem::path& dir);
/// Writes summary.csv and summary.md into `dir`.
SummaryTables write_report(const std::filesystem::path& dir);

}  // namespace cst
