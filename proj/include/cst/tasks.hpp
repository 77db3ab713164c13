// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cst/backbone.hpp"

namespace cst {

/// How a target task relates to the source task.
enum class Correlation { kSubset, kStrong, kWeak, kNone };

std::string to_string(Correlation kind);
Correlation parse_correlation(const std::string& text);

struct Dataset {
  RealTensor images;  ///< N x 3 x H x W
  std::vector<int> labels;
  int classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
};

struct TaskData {
  Dataset train;
  Dataset val;
};

/// Fixed random "teacher": per-class latent prototypes decoded to images by
/// a small upsampling conv network. Samples add latent and pixel noise.
struct Generator {
  std::vector<RealTensor> prototypes;  ///< one latent_channels x 4 x 4 tensor per class
  std::vector<RealTensor> conv_weights;
  std::vector<RealTensor> conv_biases;
  int image_size = 32;
  float latent_noise = 0.0f;
  float pixel_noise = 0.0f;
  float output_scale = 1.0f;

  int classes() const { return static_cast<int>(prototypes.size()); }
};

struct SourceSpec {
  int classes = 8;
  int image_size = 32;
  int train = 512;
  int val = 128;
  float latent_noise = 1.0f;
  float pixel_noise = 0.3f;
  std::uint64_t seed = 1;
};

struct SourceTask {
  SourceSpec spec;
  Generator generator;
  TaskData data;
};

struct TaskSpec {
  Correlation kind = Correlation::kSubset;
  int classes = 4;
  int train = 1024;
  int val = 256;
  std::uint64_t seed = 2;
};

SourceTask make_source_task(const SourceSpec& spec);

/// subset: a subset of the source classes drawn from the source generator.
/// strong, weak: those classes rendered by a decoder blended toward a freshly
/// drawn one, with weight 0.25 (strong) or 0.6 (weak).
/// none: an independent generator sharing no parameters with the source.
/// Throws ConfigError if more classes are requested than the source has
/// (for the kinds that reuse source classes).
TaskData make_target_task(const TaskSpec& spec, const SourceTask& source);
Generator make_target_generator(const TaskSpec& spec, const SourceTask& source);

/// Images for `labels` drawn from `gen`; `seed` drives the sample noise.
RealTensor render(const Generator& gen, const std::vector<int>& labels, std::uint64_t seed);

/// Writes `<dir>/<name>.tensor` and `<dir>/<name>.labels.csv`.
void save_dataset(const std::filesystem::path& dir, const std::string& name, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir, const std::string& name);

}  // namespace cst
