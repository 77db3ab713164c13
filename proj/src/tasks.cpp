// SPDX-License-Identifier: Apache-2.0
#include "cst/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "cst/ops.hpp"

namespace cst {

std::string to_string(Correlation kind) {
  switch (kind) {
    case Correlation::kSubset: return "subset";
    case Correlation::kStrong: return "strong";
    case Correlation::kWeak: return "weak";
    case Correlation::kNone: return "none";
  }
  return "?";
}

Correlation parse_correlation(const std::string& text) {
  for (Correlation c : {Correlation::kSubset, Correlation::kStrong, Correlation::kWeak, Correlation::kNone}) {
    if (text == to_string(c)) return c;
  }
  throw ConfigError("unknown task kind '" + text + "' (expected subset, strong, weak or none)");
}

namespace {

constexpr int kLatentChannels = 8;
constexpr int kLatentSize = 4;
constexpr int kHidden = 32;
constexpr float kStrongBlend = 0.25f;
constexpr float kWeakBlend = 0.6f;

RealTensor normal(const Shape& shape, float stddev, std::mt19937_64& rng) {
  RealTensor t(shape);
  std::normal_distribution<float> d(0.0f, stddev);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

RealTensor upsample2(const RealTensor& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  RealTensor y({n, c, 2 * h, 2 * w});
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < c; ++b) {
      for (int i = 0; i < 2 * h; ++i) {
        for (int j = 0; j < 2 * w; ++j) y.at(a, b, i, j) = x.at(a, b, i / 2, j / 2);
      }
    }
  }
  return y;
}

int decoder_depth(int image_size) {
  int depth = 0;
  for (int s = kLatentSize; s < image_size; s *= 2) ++depth;
  if (depth < 1 || kLatentSize << depth != image_size) {
    throw ConfigError("image size must be " + std::to_string(kLatentSize) + " times a power of two, got " +
                      std::to_string(image_size));
  }
  return depth;
}

RealTensor decode(const Generator& gen, RealTensor latent) {
  const std::size_t depth = gen.conv_weights.size();
  RealTensor x = std::move(latent);
  for (std::size_t l = 0; l < depth; ++l) {
    Graph<Real> g;
    RealVar v = conv2d(g.data(upsample2(x)), g.data(gen.conv_weights[l]), g.data(gen.conv_biases[l]), 1, 1);
    if (l + 1 < depth) v = relu(v);
    x = v.value();
  }
  return x;
}

void draw_decoder(Generator& gen, std::mt19937_64& rng) {
  gen.conv_weights.clear();
  gen.conv_biases.clear();
  const int depth = decoder_depth(gen.image_size);
  int cin = kLatentChannels;
  for (int l = 0; l < depth; ++l) {
    const int cout = l + 1 == depth ? 3 : kHidden;
    gen.conv_weights.push_back(normal({cout, cin, 3, 3}, std::sqrt(2.0f / static_cast<float>(cin * 9)), rng));
    gen.conv_biases.push_back(normal({cout}, 0.1f, rng));
    cin = cout;
  }
}

// Unit pixel variance on clean prototypes.
void normalize_output(Generator& gen) {
  const std::int64_t zs = gen.prototypes[0].size();
  RealTensor latents({gen.classes(), kLatentChannels, kLatentSize, kLatentSize});
  for (int c = 0; c < gen.classes(); ++c) {
    latents.data().segment(c * zs, zs) = gen.prototypes[static_cast<std::size_t>(c)].data();
  }
  const RealTensor img = decode(gen, std::move(latents));
  const double mean = img.data().cast<double>().mean();
  const double var = (img.data().cast<double>().array() - mean).square().mean();
  gen.output_scale = static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-12)));
}

Generator make_generator(int classes, int image_size, float latent_noise, float pixel_noise, std::uint64_t seed) {
  if (classes < 1) throw ConfigError("a task needs at least one class");
  Generator gen;
  gen.image_size = image_size;
  gen.latent_noise = latent_noise;
  gen.pixel_noise = pixel_noise;
  std::mt19937_64 rng(derive_seed(seed, "generator"));
  for (int c = 0; c < classes; ++c) gen.prototypes.push_back(normal({kLatentChannels, kLatentSize, kLatentSize}, 1.0f, rng));
  draw_decoder(gen, rng);
  normalize_output(gen);
  return gen;
}

// Variance-preserving blend of the decoder with a freshly drawn one:
// sqrt(1 - a^2) * w + a * w_fresh.
void blend_decoder(Generator& gen, float a, std::uint64_t seed) {
  Generator fresh = gen;
  std::mt19937_64 rng(seed);
  draw_decoder(fresh, rng);
  const float keep = std::sqrt(1.0f - a * a);
  for (std::size_t l = 0; l < gen.conv_weights.size(); ++l) {
    gen.conv_weights[l].data() = keep * gen.conv_weights[l].data() + a * fresh.conv_weights[l].data();
    gen.conv_biases[l].data() = keep * gen.conv_biases[l].data() + a * fresh.conv_biases[l].data();
  }
  normalize_output(gen);
}

std::vector<int> balanced_labels(int count, int classes, std::uint64_t seed) {
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  std::mt19937_64 rng(seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

TaskData sample(const Generator& gen, int train, int val, std::uint64_t seed) {
  TaskData d;
  d.train.classes = d.val.classes = gen.classes();
  d.train.labels = balanced_labels(train, gen.classes(), derive_seed(seed, "train.labels"));
  d.val.labels = balanced_labels(val, gen.classes(), derive_seed(seed, "val.labels"));
  d.train.images = render(gen, d.train.labels, derive_seed(seed, "train.noise"));
  d.val.images = render(gen, d.val.labels, derive_seed(seed, "val.noise"));
  return d;
}

}  // namespace

RealTensor render(const Generator& gen, const std::vector<int>& labels, std::uint64_t seed) {
  const int n = static_cast<int>(labels.size());
  if (n == 0) return RealTensor({1, 3, gen.image_size, gen.image_size});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  const std::int64_t zs = static_cast<std::int64_t>(kLatentChannels) * kLatentSize * kLatentSize;
  RealTensor latents({n, kLatentChannels, kLatentSize, kLatentSize});
  for (int i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= gen.classes()) throw ConfigError("label " + std::to_string(c) + " outside generator classes");
    const RealTensor& p = gen.prototypes[static_cast<std::size_t>(c)];
    for (std::int64_t k = 0; k < zs; ++k) latents[i * zs + k] = p[k] + gen.latent_noise * d(rng);
  }
  RealTensor img = decode(gen, std::move(latents));
  for (std::int64_t k = 0; k < img.size(); ++k) img[k] = gen.output_scale * img[k] + gen.pixel_noise * d(rng);
  return img;
}

SourceTask make_source_task(const SourceSpec& spec) {
  SourceTask s;
  s.spec = spec;
  s.generator = make_generator(spec.classes, spec.image_size, spec.latent_noise, spec.pixel_noise, spec.seed);
  s.data = sample(s.generator, spec.train, spec.val, derive_seed(spec.seed, "source.samples"));
  return s;
}

Generator make_target_generator(const TaskSpec& spec, const SourceTask& source) {
  const Generator& src = source.generator;
  if (spec.classes < 1) throw ConfigError("target task needs at least one class");
  if (spec.kind == Correlation::kNone) {
    return make_generator(spec.classes, src.image_size, src.latent_noise, src.pixel_noise,
                          derive_seed(spec.seed, "independent"));
  }
  if (spec.classes > src.classes()) {
    throw ConfigError("subset of " + std::to_string(spec.classes) + " classes requested from a source with " +
                      std::to_string(src.classes()));
  }
  std::vector<int> order(static_cast<std::size_t>(src.classes()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(spec.seed, "class.subset"));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(spec.classes));
  std::sort(order.begin(), order.end());

  Generator gen = src;
  gen.prototypes.clear();
  for (int c : order) gen.prototypes.push_back(src.prototypes[static_cast<std::size_t>(c)]);

  if (spec.kind != Correlation::kSubset) {
    blend_decoder(gen, spec.kind == Correlation::kStrong ? kStrongBlend : kWeakBlend, derive_seed(spec.seed, "decoder"));
  }
  return gen;
}

TaskData make_target_task(const TaskSpec& spec, const SourceTask& source) {
  return sample(make_target_generator(spec, source), spec.train, spec.val, derive_seed(spec.seed, "target.samples"));
}

void save_dataset(const std::filesystem::path& dir, const std::string& name, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / (name + ".tensor"), std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / (name + ".tensor")).string());
    write_tensor(os, ds.images);
  }
  std::ofstream os(dir / (name + ".labels.csv"));
  if (!os) throw std::runtime_error("cannot write " + (dir / (name + ".labels.csv")).string());
  os << "index,label\n";
  for (int i = 0; i < ds.size(); ++i) os << i << ',' << ds.labels[static_cast<std::size_t>(i)] << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& name) {
  Dataset ds;
  std::ifstream is(dir / (name + ".tensor"), std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + (dir / (name + ".tensor")).string());
  ds.images = read_tensor(is);
  std::ifstream ls(dir / (name + ".labels.csv"));
  if (!ls) throw std::runtime_error("cannot read " + (dir / (name + ".labels.csv")).string());
  std::string line;
  std::getline(ls, line);
  while (std::getline(ls, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed label row: " + line);
    const int label = std::stoi(line.substr(comma + 1));
    ds.labels.push_back(label);
    ds.classes = std::max(ds.classes, label + 1);
  }
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.size()) {
    throw std::runtime_error("dataset " + name + ": image count does not match label count");
  }
  return ds;
}

}  // namespace cst
