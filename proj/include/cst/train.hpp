// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cst/memory.hpp"
#include "cst/strategies.hpp"
#include "cst/tasks.hpp"

namespace cst {

enum class LossKind { kCrossEntropy, kMse, kL1 };

std::string to_string(LossKind kind);
LossKind parse_loss(const std::string& text);

struct TrainConfig {
  double lr0 = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 4;
  int epochs = 12;  ///< also the cosine period
  LossKind loss = LossKind::kCrossEntropy;
  std::uint64_t seed = 0;

  /// Throws ConfigError; epochs = 0 is allowed and trains nothing.
  void validate() const;
};

/// lr0 * 0.5 * (1 + cos(pi t / T)) for 0 <= t <= T; throws std::out_of_range otherwise.
double cosine_lr(std::int64_t t, std::int64_t T, double lr0);

struct AdamState {
  std::map<std::string, RealTensor> m;
  std::map<std::string, RealTensor> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient; frozen parameters are skipped whatever `grads` holds.
/// Throws ShapeError when a gradient does not match its parameter.
void adam_step(ParameterStore& params, const std::map<std::string, RealTensor>& grads, AdamState& state, double lr,
               const TrainConfig& cfg);

/// Graph loss for a batch; MSE and L1 regress logits onto one-hot targets.
RealVar task_loss(LossKind kind, RealVar output, const std::vector<int>& labels);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double lr = 0;  ///< learning rate of the epoch's last step
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<double> lr_trace;  ///< one entry per optimizer step
  double wall_seconds = 0;
  std::optional<MemoryReport> memory;  ///< from the first step's tape
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

EvalResult evaluate(const ModelSpec& model, const Dataset& data, LossKind loss, int batch_size = 64);

/// Trains `model` in place. Deterministic given cfg.seed. Throws
/// std::runtime_error when a batch loss is not finite.
TrainLog train(ModelSpec& model, const TaskData& data, const TrainConfig& cfg);

/// Copies rows [begin, begin + count) of `order` into a batch.
RealTensor gather_images(const Dataset& data, const std::vector<int>& order, int begin, int count);

/// epoch,train_loss,val_loss,val_accuracy,lr
std::string trainlog_csv(const TrainLog& log);
/// Parses `trainlog_csv` output; throws std::runtime_error on malformed input.
std::vector<EpochLog> parse_trainlog_csv(const std::string& text);

/// Plain-text header (one "param <name> <d0>x<d1>... trainable=<0|1>" line per
/// tensor, closed by "end") followed by the tensors in the tensor format.
void write_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                      const std::vector<std::string>& names);
ParameterStore read_checkpoint(const std::filesystem::path& path);

}  // namespace cst
