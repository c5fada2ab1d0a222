#pragma once

// Experiment configuration and the ablation matrix: every method is trained
// per seed on the same generated data, evaluated, and probed.

#include "fdl/detector.hpp"
#include "fdl/gradient_theory.hpp"
#include "fdl/json_io.hpp"
#include "fdl/synthgen.hpp"
#include "fdl/trainer.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fdl {

struct DataConfig {
  SceneSpec scene;
  ModalityProfile m1 = ModalityProfile::from_quality(0.4);
  ModalityProfile m2 = ModalityProfile::from_quality(0.8);
  std::size_t train_count = 800;
  std::size_t test_count = 200;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  OptimizerConfig optimizer;
  LossWeights weights;
  route::RoutePlan plan = route::RoutePlan::rsc_md();
  EvalConfig eval;
  // Head-only training schedule used by linear probes.
  OptimizerConfig probe;
  theory::GridConfig theory;
  std::uint64_t seed = 0;
  // Seeds of the ablation matrix; empty means {seed}.
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  // Where commands write their artifacts; --out overrides it.
  std::string output_dir;

  ExperimentConfig();
  void validate() const;
  std::vector<std::uint64_t> run_seeds() const;
};

json_io::Json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from(const json_io::Json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// SHA-256 of the canonical JSON form, output_dir excluded.
std::string config_hash(const ExperimentConfig& config);

// The data split used for one seed: train indices [0, train_count), test
// indices [train_count, train_count + test_count).
struct DataSplit {
  Dataset train;
  Dataset test;
};
DataSplit make_split(const ExperimentConfig& config, std::uint64_t seed);

inline constexpr std::array<std::string_view, 5> kMethods{"baseline", "rsc", "rsc-md", "unimodal-m1",
                                                          "unimodal-m2"};

// Training configuration of one ablation method. The baseline disables the
// auxiliary losses; the unimodal methods train a single branch.
TrainConfig method_config(const ExperimentConfig& config, std::string_view method, std::uint64_t seed);

struct RunOutcome {
  std::string method;
  std::uint64_t seed = 0;
  EvalResult eval;
  GradientTrace trace;
  std::string checkpoint_sha256;
  std::vector<ProbeResult> probes;
  std::string run_dir;  // relative to the experiment output directory
  // Wall time of training plus evaluation, and of the whole run with probes.
  // Not part of any report.
  double train_seconds = 0.0;
  double total_seconds = 0.0;
};

struct SeedData {
  std::uint64_t seed = 0;
  std::string train_sha256;
  std::string test_sha256;
};

struct AblationResult {
  ExperimentConfig config;
  std::vector<RunOutcome> runs;  // seed-major, method order of kMethods
  std::vector<SeedData> data;
  theory::SweepSummary theory;

  const RunOutcome& run(std::string_view method, std::uint64_t seed) const;
};

// Trains, evaluates and probes every (seed, method) pair, writing each run's
// checkpoint, trace and metrics under out/seed-<s>/<method>. Runs execute on
// `workers` threads; results do not depend on the worker count.
AblationResult run_ablation(const ExperimentConfig& config, const std::filesystem::path& out);

// Output directory policy shared by every command: an existing non-empty
// directory is refused unless `force`, in which case it is cleared.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

}  // namespace fdl
