// SPDX-License-Identifier: Apache-2.0
// cst_lab: gradient checks, memory checks, experiment runs and reports.
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "cst/experiment.hpp"
#include "cst/gradcheck.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

std::vector<std::string> split_ops(const std::string& text) {
  if (text == "all") return cst::gradcheck_op_names();
  std::vector<std::string> ops;
  std::stringstream ss(text);
  for (std::string op; std::getline(ss, op, ',');) {
    if (!op.empty()) ops.push_back(op);
  }
  return ops;
}

int cmd_gradcheck(const std::string& ops, int trials, std::uint64_t seed) {
  cst::GradCheckOptions opt;
  opt.trials = trials;
  opt.seed = seed;
  std::vector<cst::OpCheckResult> results;
  try {
    results = cst::run_gradcheck(split_ops(ops), opt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "gradcheck: " << e.what() << "\n";
    return kUsage;
  }
  if (results.empty()) {
    std::cout << "no trials requested\n";
    return kOk;
  }
  bool ok = true;
  std::printf("%-16s %9s %8s %10s %10s %11s %11s  %s\n", "op", "instances", "skipped", "points", "skip_pts",
              "max_err32", "max_err64", "result");
  for (const auto& r : results) {
    std::printf("%-16s %9d %8d %10lld %10lld %11.3e %11.3e  %s\n", r.op.c_str(), r.instances, r.skipped_instances,
                static_cast<long long>(r.points), static_cast<long long>(r.skipped_points), r.max_err32, r.max_err64,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

int cmd_memcheck(const cst::ExperimentConfig& cfg) {
  const auto rows = cst::run_memcheck(cfg);
  std::vector<cst::ReportRow> table;
  bool ok = true;
  const cst::MemoryReport* full = nullptr;
  const cst::MemoryReport* side = nullptr;
  for (const auto& r : rows) {
    table.push_back({r.strategy, r.predicted, {}});
    if (!(r.predicted == r.measured)) {
      std::cerr << "memcheck: " << r.strategy << " predicted " << r.predicted.retained_train_elems
                << " retained elements, measured " << r.measured.retained_train_elems << "\n";
      ok = false;
    }
    if (r.strategy == "full") full = &r.predicted;
    if (r.strategy == "cst") side = &r.predicted;
  }
  std::cout << cst::report_markdown(table, {});
  if (full && side && side->retained_train_elems >= full->retained_train_elems) {
    std::cerr << "memcheck: cst retains " << side->retained_train_elems << " elements, full retains "
              << full->retained_train_elems << "\n";
    ok = false;
  }
  std::cout << (ok ? "predict == measure on every row\n" : "memcheck FAILED\n");
  return ok ? kOk : kFailed;
}

int cmd_run(const cst::ExperimentConfig& cfg, const std::filesystem::path& out) {
  cst::run_experiment(cfg, out, std::cerr);
  std::cout << cst::build_report(out).markdown;
  return kOk;
}

int cmd_report(const std::filesystem::path& in) {
  if (!std::filesystem::is_directory(in) || !std::filesystem::exists(in / "manifest.json")) {
    std::cerr << "report: " << in.string() << " is not a run directory\n";
    return kUsage;
  }
  std::cout << cst::write_report(in).markdown;
  return kOk;
}

cst::ExperimentConfig config_from(const std::string& path) {
  cst::ExperimentConfig cfg = cst::load_config(path);
  if (const char* env = std::getenv("CST_SEED")) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (!*env || *end) throw cst::ConfigError(std::string("CST_SEED is not an unsigned integer: '") + env + "'");
    cfg.reseed(seed);
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration side tuning lab"};
  app.require_subcommand(1);

  std::string ops = "all";
  int trials = 100;
  std::uint64_t gc_seed = cst::GradCheckOptions{}.seed;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--ops", ops, "'all' or a comma-separated op list");
  gc->add_option("--trials", trials, "random instances per op")->check(CLI::NonNegativeNumber);
  gc->add_option("--seed", gc_seed, "instance seed");

  std::string config;
  auto* mem = app.add_subcommand("memcheck", "predicted vs measured retained activations");
  mem->add_option("--config", config, "experiment config (JSON)")->required();

  std::string out;
  auto* run = app.add_subcommand("run", "train every (strategy, task) cell");
  run->add_option("--config", config, "experiment config (JSON)")->required();
  run->add_option("--out", out, "output directory")->required();

  std::string in;
  auto* rep = app.add_subcommand("report", "rebuild summary tables from a run directory");
  rep->add_option("--in", in, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gc) return cmd_gradcheck(ops, trials, gc_seed);
    if (*mem) return cmd_memcheck(config_from(config));
    if (*run) return cmd_run(config_from(config), out);
    if (*rep) return cmd_report(in);
  } catch (const cst::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
