#include "fdl/experiment.hpp"

#include "fdl/tensor_file.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace fdl {

using json_io::Json;

ExperimentConfig::ExperimentConfig() {
  // The mean-over-cells BCE gives positives a tiny share of the loss at this
  // scale; these weights keep the default optimizer settings usable.
  weights.lambda_cls = 150.0;
  weights.lambda_box = 15.0;
  probe.epochs = 10;
}

void ExperimentConfig::validate() const {
  data.scene.validate(model.backbone.downsampling());
  data.m1.validate();
  data.m2.validate();
  if (data.train_count == 0 || data.test_count == 0) {
    throw std::invalid_argument("train_count and test_count must be positive");
  }
  model.validate();
  if (model.classes != data.scene.class_count) {
    throw ConfigError("/model/classes", fmt::format("model has {} classes but the scene generates {}",
                                                    model.classes, data.scene.class_count));
  }
  optimizer.validate();
  weights.validate();
  plan.validate();
  eval.validate();
  probe.validate();
  theory.validate();
  if (workers == 0) throw ConfigError("/workers", "workers must be positive");
}

std::vector<std::uint64_t> ExperimentConfig::run_seeds() const {
  return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds;
}

Json to_json(const ExperimentConfig& c) {
  Json scene = json_io::to_json(c.data.scene);
  scene.erase("seed");
  return {{"seed", c.seed},
          {"seeds", c.seeds},
          {"workers", c.workers},
          {"output_dir", c.output_dir},
          {"data",
           {{"scene", scene},
            {"m1", json_io::to_json(c.data.m1)},
            {"m2", json_io::to_json(c.data.m2)},
            {"train_count", c.data.train_count},
            {"test_count", c.data.test_count}}},
          {"model", json_io::to_json(c.model)},
          {"optimizer", json_io::to_json(c.optimizer)},
          {"loss", json_io::to_json(c.weights)},
          {"route", json_io::to_json(c.plan)},
          {"eval", json_io::to_json(c.eval)},
          {"probe", json_io::to_json(c.probe)},
          {"theory", json_io::to_json(c.theory)}};
}

ExperimentConfig experiment_from(const Json& j) {
  ExperimentConfig c;
  json_io::ObjectReader r(j, "");
  r.read("seed", c.seed);
  r.read("seeds", c.seeds);
  r.read("workers", c.workers);
  r.read("output_dir", c.output_dir);
  if (r.has("data")) {
    json_io::ObjectReader d(r.at("data"), "/data");
    if (d.has("scene")) {
      const Json& scene = d.at("scene");
      if (scene.is_object() && scene.contains("seed")) {
        throw ConfigError("/data/scene/seed", "the scene seed is set by the top-level seed");
      }
      c.data.scene = json_io::scene_spec_from(scene, "/data/scene");
    }
    if (d.has("m1")) c.data.m1 = json_io::profile_from(d.at("m1"), "/data/m1");
    if (d.has("m2")) c.data.m2 = json_io::profile_from(d.at("m2"), "/data/m2");
    d.read("train_count", c.data.train_count);
    d.read("test_count", c.data.test_count);
    d.finish();
  }
  if (r.has("model")) c.model = json_io::model_from(r.at("model"), "/model");
  if (r.has("optimizer")) c.optimizer = json_io::optimizer_from(r.at("optimizer"), "/optimizer");
  if (r.has("loss")) {
    // Unspecified loss fields keep the experiment defaults.
    LossWeights w = c.weights;
    Json merged = json_io::to_json(w);
    const Json& given = r.at("loss");
    if (!given.is_object()) throw ConfigError("/loss", "expected an object");
    for (const auto& [k, v] : given.items()) merged[k] = v;
    c.weights = json_io::loss_from(merged, "/loss");
  }
  if (r.has("route")) c.plan = json_io::route_from(r.at("route"), "/route");
  if (r.has("eval")) c.eval = json_io::eval_from(r.at("eval"), "/eval");
  if (r.has("probe")) {
    Json merged = json_io::to_json(c.probe);
    const Json& given = r.at("probe");
    if (!given.is_object()) throw ConfigError("/probe", "expected an object");
    for (const auto& [k, v] : given.items()) merged[k] = v;
    c.probe = json_io::optimizer_from(merged, "/probe");
  }
  if (r.has("theory")) c.theory = json_io::grid_from(r.at("theory"), "/theory");
  r.finish();
  json_io::validated("", {"workers"}, [&] { c.validate(); });
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  }
  return experiment_from(j);
}

std::string config_hash(const ExperimentConfig& config) {
  Json j = to_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

DataSplit make_split(const ExperimentConfig& config, std::uint64_t seed) {
  SceneSpec scene = config.data.scene;
  scene.seed = seed;
  const auto& d = config.data;
  return {generate_dataset(scene, d.m1, d.m2, 0, d.train_count),
          generate_dataset(scene, d.m1, d.m2, d.train_count, d.test_count)};
}

TrainConfig method_config(const ExperimentConfig& config, std::string_view method, std::uint64_t seed) {
  TrainConfig t;
  t.model = config.model;
  t.weights = config.weights;
  t.optimizer = config.optimizer;
  t.optimizer.seed = seed;
  t.seed = seed;
  if (method == "baseline") {
    t.model.mode = ModelMode::kFusion;
    t.plan = route::RoutePlan::baseline();
    t.weights.beta = 0.0;
    t.weights.gamma = 0.0;
    if (t.weights.alpha == 0.0) t.weights.alpha = 1.0;
  } else if (method == "rsc" || method == "rsc-md") {
    t.model.mode = ModelMode::kFusion;
    t.plan = route::RoutePlan::preset(method);
  } else if (method == "unimodal-m1" || method == "unimodal-m2") {
    t.model.mode = parse_mode(std::string(method));
  } else {
    throw std::invalid_argument(fmt::format("unknown ablation method '{}'", method));
  }
  return t;
}

const RunOutcome& AblationResult::run(std::string_view method, std::uint64_t seed) const {
  for (const auto& r : runs) {
    if (r.method == method && r.seed == seed) return r;
  }
  throw std::out_of_range(fmt::format("no run for method {} seed {}", method, seed));
}

void prepare_output_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) {
        throw std::runtime_error(dir.string() + " is not empty; pass --force to overwrite");
      }
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

namespace {

Json probe_json(const ProbeResult& p) {
  return {{"branch", fmt::format("m{}", p.branch + 1)},
          {"checkpoint_id", p.checkpoint_id},
          {"ap50", p.ap50},
          {"ap50_95", p.ap50_95},
          {"eval", json_io::to_json(p.eval)}};
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

RunOutcome execute_run(const ExperimentConfig& config, const DataSplit& split, std::string_view method,
                       std::uint64_t seed, const std::filesystem::path& out) {
  RunOutcome r;
  r.method = std::string(method);
  r.seed = seed;
  r.run_dir = fmt::format("seed-{}/{}", seed, method);
  const auto dir = out / r.run_dir;
  std::filesystem::create_directories(dir);

  spdlog::info("seed {} {}: training", seed, method);
  const auto started = std::chrono::steady_clock::now();
  TrainResult trained = train(method_config(config, method, seed), split.train);
  r.trace = std::move(trained.trace);
  r.checkpoint_sha256 = checkpoint_digest(trained.model);
  r.eval = evaluate(trained.model, split.test, config.eval);
  r.train_seconds = seconds_since(started);
  spdlog::info("seed {} {}: AP50-95 {:.4f}", seed, method, r.eval.mean_ap50_95);

  for (int branch = 0; branch < 2; ++branch) {
    if (!trained.model.has_branch(branch)) continue;
    r.probes.push_back(
        linear_probe(trained.model, branch, split.train, split.test, config.probe, config.weights, config.eval));
    spdlog::info("seed {} {}: probe m{} AP50-95 {:.4f}", seed, method, branch + 1, r.probes.back().ap50_95);
  }
  r.total_seconds = seconds_since(started);

  save_checkpoint(trained.model, dir);
  std::ofstream trace(dir / "trace.csv");
  r.trace.write_csv(trace);
  Json probes = Json::array();
  for (const auto& p : r.probes) probes.push_back(probe_json(p));
  write_file_bytes(dir / "eval.json", Json{{"method", r.method},
                                           {"seed", seed},
                                           {"checkpoint_sha256", r.checkpoint_sha256},
                                           {"eval", json_io::to_json(r.eval)},
                                           {"probes", probes}}
                                          .dump(2) +
                                          "\n");
  return r;
}

}  // namespace

AblationResult run_ablation(const ExperimentConfig& config, const std::filesystem::path& out) {
  config.validate();
  AblationResult result;
  result.config = config;
  result.theory = theory::summarize(theory::sweep(config.theory));

  const auto seeds = config.run_seeds();
  std::vector<DataSplit> splits;
  for (auto s : seeds) {
    splits.push_back(make_split(config, s));
    result.data.push_back({s, dataset_digest(splits.back().train), dataset_digest(splits.back().test)});
  }

  struct Task {
    std::size_t seed_index;
    std::string_view method;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (auto m : kMethods) tasks.push_back({i, m});
  }
  result.runs.resize(tasks.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < tasks.size(); k = next++) {
      try {
        const Task& t = tasks[k];
        result.runs[k] = execute_run(config, splits[t.seed_index], t.method, seeds[t.seed_index], out);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const std::size_t workers = std::min(config.workers, tasks.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return result;
}

}  // namespace fdl
