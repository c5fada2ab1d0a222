#pragma once

#include "fdl/detector.hpp"
#include "fdl/metrics.hpp"
#include "fdl/route.hpp"
#include "fdl/synthgen.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double initial_lr = 1e-2;
  double final_lr = 1e-6;
  double momentum = 0.937;
  double weight_decay = 1e-5;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
  // Linear interpolation: lr(0) = initial_lr, lr(total_steps - 1) = final_lr.
  double lr_at(std::size_t step, std::size_t total_steps) const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
// Frozen parameters are skipped. Gradients are left untouched.
void sgd_step(std::span<ad::Parameter* const> params, double lr, const OptimizerConfig& opt);
void zero_grads(std::span<ad::Parameter* const> params);

struct TraceRecord {
  std::size_t step = 0;
  int branch = 0;
  double lr = 0.0;
  // L2 norm of the loss gradient at the probe-stage output of this branch.
  double probe_grad_norm = 0.0;
  // Gradient the fusion branch passed into this backbone, all levels.
  double fusion_component_norm = 0.0;
  double loss_total = 0.0;
  double loss_fusion = 0.0;
  double loss_aux1 = 0.0;
  double loss_aux2 = 0.0;
};

struct GradientTrace {
  std::vector<TraceRecord> records;

  std::vector<int> branches() const;
  double mean_probe_norm(int branch) const;
  void write_csv(std::ostream& os) const;
};

struct EvalConfig {
  double score_threshold = 0.01;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  std::size_t batch_size = 32;

  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TrainConfig {
  ModelConfig model;
  route::RoutePlan plan = route::RoutePlan::rsc_md();
  LossWeights weights;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  GradientTrace trace;
};

TrainResult train(const TrainConfig& config, const Dataset& dataset);

// Scores above the threshold become candidates; top max_detections per image
// after greedy NMS.
std::vector<Detection> decode_detections(const HeadOutput& output, const TargetGeometry& geometry,
                                         std::size_t image_offset, const EvalConfig& config);
std::vector<GroundTruth> ground_truths(const Dataset& dataset);

EvalResult evaluate(const Model& model, const Dataset& dataset, const EvalConfig& config = {});

struct ProbeResult {
  int branch = 0;
  std::string checkpoint_id;
  double ap50 = 0.0;
  double ap50_95 = 0.0;
  EvalResult eval;
};

// Freezes the branch backbone, trains a freshly initialized head on its
// frozen features, evaluates on `test`. The model is not modified.
ProbeResult linear_probe(const Model& model, int branch, const Dataset& train_set, const Dataset& test_set,
                         const OptimizerConfig& opt, const LossWeights& weights, const EvalConfig& eval = {});

struct GradientRatios {
  std::vector<int> branches;
  std::vector<double> ratios;  // mean norm of a / mean norm of b, per branch

  double ratio(int branch) const;
};

GradientRatios gradient_ratio_report(const GradientTrace& a, const GradientTrace& b);

// [N, C, H, W] image batch of one modality.
Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices, int branch);

}  // namespace fdl
