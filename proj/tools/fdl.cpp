#include "fdl/experiment.hpp"
#include "fdl/log.hpp"
#include "fdl/report.hpp"
#include "fdl/tensor_file.hpp"

#include "CLI11.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using fdl::json_io::Json;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool force = false;
  std::string data;
  std::string checkpoint;
  std::string branch = "m1";
  std::string method;
};

fdl::ExperimentConfig load_config(const Options& o) {
  fdl::ExperimentConfig c = o.config.empty() ? fdl::ExperimentConfig{} : fdl::load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (!o.out.empty()) c.output_dir = o.out;
  fdl::json_io::validated("", {"workers"}, [&] { c.validate(); });
  return c;
}

fs::path output_dir(const fdl::ExperimentConfig& c, const Options& o) {
  if (c.output_dir.empty()) throw std::invalid_argument("no output directory: pass --out or set output_dir");
  fs::path dir = c.output_dir;
  fdl::prepare_output_dir(dir, o.force);
  return dir;
}

void write_json(const fs::path& path, const Json& j) { fdl::write_file_bytes(path, j.dump(2) + "\n"); }

int branch_index(const std::string& name) {
  if (name == "m1") return 0;
  if (name == "m2") return 1;
  throw std::invalid_argument(fmt::format("branch must be m1 or m2, got '{}'", name));
}

fs::path require_dir(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(fmt::format("--{} is required", what));
  if (!fs::is_directory(path)) throw std::runtime_error(fmt::format("{} directory not found: {}", what, path));
  return path;
}

int cmd_verify_theory(const Options& o) {
  const auto c = load_config(o);
  const auto rows = fdl::theory::sweep(c.theory);
  const auto summary = fdl::theory::summarize(rows);
  const auto dir = output_dir(c, o);
  std::ofstream csv(dir / "theory.csv");
  fdl::theory::write_sweep_csv(csv, rows);
  spdlog::info("{} grid points, {} counterexamples, max cross-check error {:.3g}", summary.points,
               summary.counterexamples(), summary.max_crosscheck_error);
  if (summary.counterexamples() == 0) return 0;
  std::ostringstream bad;
  std::vector<fdl::theory::SweepRow> failing;
  for (const auto& r : rows) {
    if (!r.ok()) failing.push_back(r);
  }
  fdl::theory::write_sweep_csv(bad, failing);
  std::cerr << "counterexamples:\n" << bad.str();
  return 1;
}

int cmd_gen_data(const Options& o) {
  const auto c = load_config(o);
  const auto dir = output_dir(c, o);
  const auto split = fdl::make_split(c, c.seed);
  fdl::write_dataset(dir / "train", split.train);
  fdl::write_dataset(dir / "test", split.test);
  write_json(dir / "config.json", fdl::to_json(c));
  spdlog::info("wrote {} train and {} test samples to {}", split.train.size(), split.test.size(), dir.string());
  return 0;
}

int cmd_train(const Options& o) {
  const auto c = load_config(o);
  const auto data = require_dir(o.data, "data");
  const auto train_set = fdl::read_dataset(data / "train");
  fdl::TrainConfig t;
  if (o.method.empty()) {
    t.model = c.model;
    t.plan = c.plan;
    t.weights = c.weights;
    t.optimizer = c.optimizer;
    t.optimizer.seed = c.seed;
    t.seed = c.seed;
  } else {
    t = fdl::method_config(c, o.method, c.seed);
  }
  const auto dir = output_dir(c, o);
  auto result = fdl::train(t, train_set);
  fdl::save_checkpoint(result.model, dir);
  std::ofstream trace(dir / "trace.csv");
  result.trace.write_csv(trace);
  write_json(dir / "config.json", fdl::to_json(c));
  Json norms = Json::object();
  for (int b : result.trace.branches()) norms[fmt::format("m{}", b + 1)] = result.trace.mean_probe_norm(b);
  write_json(dir / "train.json", {{"method", o.method.empty() ? "config" : o.method},
                                  {"seed", c.seed},
                                  {"dataset_sha256", fdl::dataset_digest(train_set)},
                                  {"checkpoint_sha256", fdl::checkpoint_digest(result.model)},
                                  {"mean_probe_grad_norm", norms}});
  spdlog::info("checkpoint written to {}", dir.string());
  return 0;
}

int cmd_eval(const Options& o) {
  const auto c = load_config(o);
  const auto model = fdl::load_checkpoint(require_dir(o.checkpoint, "checkpoint"));
  const auto test_set = fdl::read_dataset(require_dir(o.data, "data") / "test");
  const auto dir = output_dir(c, o);
  const auto r = fdl::evaluate(model, test_set, c.eval);
  write_json(dir / "eval.json", {{"checkpoint_sha256", fdl::checkpoint_digest(model)},
                                 {"dataset_sha256", fdl::dataset_digest(test_set)},
                                 {"eval", fdl::json_io::to_json(r)}});
  spdlog::info("AP50 {:.4f} AP75 {:.4f} AP50-95 {:.4f}", r.mean_ap50, r.mean_ap75, r.mean_ap50_95);
  return 0;
}

int cmd_probe(const Options& o) {
  const auto c = load_config(o);
  const int branch = branch_index(o.branch);
  const auto model = fdl::load_checkpoint(require_dir(o.checkpoint, "checkpoint"));
  const auto data = require_dir(o.data, "data");
  const auto train_set = fdl::read_dataset(data / "train");
  const auto test_set = fdl::read_dataset(data / "test");
  const auto dir = output_dir(c, o);
  const auto p = fdl::linear_probe(model, branch, train_set, test_set, c.probe, c.weights, c.eval);
  write_json(dir / "probe.json", {{"branch", o.branch},
                                  {"checkpoint_id", p.checkpoint_id},
                                  {"ap50", p.ap50},
                                  {"ap50_95", p.ap50_95},
                                  {"eval", fdl::json_io::to_json(p.eval)}});
  spdlog::info("probe {} AP50 {:.4f} AP50-95 {:.4f}", o.branch, p.ap50, p.ap50_95);
  return 0;
}

int cmd_ablate(const Options& o) {
  auto c = load_config(o);
  if (o.seed) c.seeds = {*o.seed};
  const auto dir = output_dir(c, o);
  write_json(dir / "config.json", fdl::to_json(c));
  const auto result = fdl::run_ablation(c, dir);
  fdl::report::write_report_bundle(result, dir, fdl::report::utc_timestamp());
  spdlog::info("report written to {}", (dir / "report.json").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    fdl::log::init_from_env();
  } catch (const std::exception& e) {
    std::cerr << "error: FDL_LOG_LEVEL: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Multimodal detection toolkit with modality-decoupled gradient routing"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Experiment config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--seed", o.seed, "Overrides the config seed");
    cmd->add_flag("--force", o.force, "Clear a non-empty output directory");
  };

  auto* verify = app.add_subcommand("verify-theory", "Check the gradient inequalities on a grid");
  common(verify);
  auto* gen = app.add_subcommand("gen-data", "Generate the train and test splits");
  common(gen);
  auto* train = app.add_subcommand("train", "Train one model");
  common(train);
  train->add_option("--data", o.data, "Dataset directory from gen-data")->required();
  train->add_option("--method", o.method, "Ablation method; default uses the config route and weights")
      ->check(CLI::IsMember({"baseline", "rsc", "rsc-md", "unimodal-m1", "unimodal-m2"}));
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", o.data, "Dataset directory from gen-data")->required();
  auto* probe = app.add_subcommand("probe", "Linear probe of one frozen backbone");
  common(probe);
  probe->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  probe->add_option("--data", o.data, "Dataset directory from gen-data")->required();
  probe->add_option("--branch", o.branch, "m1 or m2")->check(CLI::IsMember({"m1", "m2"}));
  auto* ablate = app.add_subcommand("ablate", "Run the ablation matrix and write the report");
  common(ablate);
  ablate->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) return cmd_verify_theory(o);
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*probe) return cmd_probe(o);
    if (*ablate) return cmd_ablate(o);
  } catch (const fdl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
