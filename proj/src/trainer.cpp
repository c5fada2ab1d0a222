#include "fdl/trainer.hpp"

#include "fdl/gradient_theory.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

namespace fdl {

void OptimizerConfig::validate() const {
  if (!(final_lr > 0.0) || !std::isfinite(final_lr)) throw std::invalid_argument("final_lr must be positive");
  if (!(initial_lr >= final_lr) || !std::isfinite(initial_lr)) {
    throw std::invalid_argument("initial_lr must be >= final_lr");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw std::invalid_argument("weight_decay must be >= 0");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

double OptimizerConfig::lr_at(std::size_t step, std::size_t total_steps) const {
  if (total_steps <= 1) return initial_lr;
  const double t = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  if (t == 1.0) return final_lr;
  return initial_lr + (final_lr - initial_lr) * t;
}

void sgd_step(std::span<ad::Parameter* const> params, double lr, const OptimizerConfig& opt) {
  for (ad::Parameter* p : params) {
    if (p->frozen) continue;
    p->momentum.data() = opt.momentum * p->momentum.data() + (p->grad.data() + opt.weight_decay * p->value.data());
    p->value.data() -= lr * p->momentum.data();
  }
}

void zero_grads(std::span<ad::Parameter* const> params) {
  for (ad::Parameter* p : params) p->zero_grad();
}

std::vector<int> GradientTrace::branches() const {
  std::set<int> s;
  for (const auto& r : records) s.insert(r.branch);
  return {s.begin(), s.end()};
}

double GradientTrace::mean_probe_norm(int branch) const {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.branch != branch) continue;
    acc += r.probe_grad_norm;
    ++n;
  }
  if (n == 0) throw TrainingError(fmt::format("gradient trace has no records for branch {}", branch));
  return acc / static_cast<double>(n);
}

void GradientTrace::write_csv(std::ostream& os) const {
  os << "step,branch,lr,probe_grad_norm,fusion_component_norm,loss_total,loss_fusion,loss_aux1,loss_aux2\n";
  for (const auto& r : records) {
    os << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.step, r.branch, r.lr,
                      r.probe_grad_norm, r.fusion_component_norm, r.loss_total, r.loss_fusion, r.loss_aux1,
                      r.loss_aux2);
  }
}

void EvalConfig::validate() const {
  if (!(score_threshold >= 0.0 && score_threshold < 1.0)) {
    throw std::invalid_argument("score_threshold must be in [0, 1)");
  }
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw std::invalid_argument("nms_iou must be in (0, 1]");
  if (max_detections == 0) throw std::invalid_argument("max_detections must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices, int branch) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Tensor& first = branch == 0 ? dataset.samples.at(indices[0]).image_m1 : dataset.samples.at(indices[0]).image_m2;
  Shape shape{indices.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  const auto per = static_cast<Eigen::Index>(first.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const ModalitySample& s = dataset.samples.at(indices[k]);
    const Tensor& img = branch == 0 ? s.image_m1 : s.image_m2;
    out.data().segment(static_cast<Eigen::Index>(k) * per, per) = img.data();
  }
  return out;
}

namespace {

void check_compatible(const Model& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw TrainingError("dataset is empty");
  if (dataset.spec.class_count != model.config().classes) {
    throw std::invalid_argument(fmt::format("class-count mismatch: dataset has {} classes, model has {}",
                                            dataset.spec.class_count, model.config().classes));
  }
  const std::size_t d = model.config().backbone.downsampling();
  if (dataset.spec.image_size % d != 0) {
    throw ConfigError("/scene/image_size", fmt::format("image size {} is not divisible by the backbone "
                                                       "downsampling {}",
                                                       dataset.spec.image_size, d));
  }
}

void check_finite(const char* term, const std::optional<ad::Var>& v, std::size_t step) {
  if (!v) return;
  const double x = v->value().item();
  if (!std::isfinite(x)) throw TrainingError(fmt::format("non-finite loss at step {}: term {} = {}", step, term, x));
}

double value_or_zero(const std::optional<ad::Var>& v) { return v ? v->value().item() : 0.0; }

// Runs the SGD loop on `model` in place. Frozen parameters are left untouched.
GradientTrace run_training(Model& model, const route::RoutePlan& plan, const LossWeights& weights,
                           const OptimizerConfig& opt, const Dataset& dataset, std::uint64_t seed) {
  opt.validate();
  weights.validate();
  plan.validate();
  check_compatible(model, dataset);
  const TargetGeometry geometry = TargetGeometry::of(model.config(), dataset.spec.image_size);
  const std::size_t n = dataset.samples.size();
  const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;
  const auto params = model.parameters();
  const std::uint64_t shuffle_seed = derive_seed(derive_seed(seed, "shuffle"), opt.seed);

  GradientTrace trace;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(shuffle_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t begin = b * opt.batch_size;
      const std::span<const std::size_t> idx(order.data() + begin, std::min(opt.batch_size, n - begin));
      std::vector<const Annotations*> labels;
      for (auto i : idx) labels.push_back(&dataset.samples[i].labels);
      const DetectionTargets targets = assign_targets(labels, geometry);
      std::array<std::optional<Tensor>, 2> images;
      for (int i = 0; i < 2; ++i) {
        if (model.has_branch(i)) images[i] = stack_images(dataset, idx, i);
      }
      const std::array<const Tensor*, 2> image_ptrs{images[0] ? &*images[0] : nullptr,
                                                    images[1] ? &*images[1] : nullptr};

      zero_grads(params);
      ad::Tape tape;
      const ForwardGraph g = forward_train(model, tape, image_ptrs, targets, plan, weights);
      check_finite("fusion", g.fusion_loss, step);
      check_finite("aux1", g.aux_loss[0], step);
      check_finite("aux2", g.aux_loss[1], step);
      check_finite("total", g.total, step);
      const bool trainable = tape.requires_grad(g.total.id());
      if (trainable) tape.backward(g.total);

      const double lr = opt.lr_at(step, total_steps);
      for (int i = 0; i < 2; ++i) {
        if (!g.features[i]) continue;
        TraceRecord r;
        r.step = step;
        r.branch = i;
        r.lr = lr;
        const auto& grad = (*g.features[i])[kPyramidLevels - 1].grad();
        r.probe_grad_norm = grad ? grad->norm() : 0.0;
        r.fusion_component_norm = g.views ? g.views->emitted_norm(route::kFusionOutput, i) : 0.0;
        r.loss_total = g.total.value().item();
        r.loss_fusion = value_or_zero(g.fusion_loss);
        r.loss_aux1 = value_or_zero(g.aux_loss[0]);
        r.loss_aux2 = value_or_zero(g.aux_loss[1]);
        trace.records.push_back(r);
      }
      if (trainable) sgd_step(params, lr, opt);
      if (step % 50 == 0) spdlog::debug("step {}/{} lr {:.3g} loss {:.5f}", step, total_steps, lr, g.total.value().item());
    }
  }
  return trace;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset) {
  TrainResult result{Model(config.model, config.seed), {}};
  result.trace = run_training(result.model, config.plan, config.weights, config.optimizer, dataset, config.seed);
  return result;
}

std::vector<Detection> decode_detections(const HeadOutput& output, const TargetGeometry& geometry,
                                         std::size_t image_offset, const EvalConfig& config) {
  std::vector<Detection> candidates;
  const std::size_t batch = output.logits[0].dim(0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      const Tensor& logits = output.logits[l];
      const Tensor& boxes = output.boxes[l];
      const std::size_t cells = logits.dim(2);
      for (std::size_t row = 0; row < cells; ++row) {
        for (std::size_t col = 0; col < logits.dim(3); ++col) {
          const std::array<double, 4> o{boxes.at(n, 0, row, col), boxes.at(n, 1, row, col),
                                        boxes.at(n, 2, row, col), boxes.at(n, 3, row, col)};
          const Box box = decode_box(row, col, l, o, geometry);
          for (std::size_t c = 0; c < logits.dim(1); ++c) {
            const double score = theory::sigmoid(logits.at(n, c, row, col));
            if (score <= config.score_threshold) continue;
            candidates.push_back({image_offset + n, static_cast<int>(c), score, box});
          }
        }
      }
    }
  }
  std::vector<Detection> kept = non_max_suppression(std::move(candidates), config.nms_iou);
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    if (a.image != b.image) return a.image < b.image;
    return a.score > b.score;
  });
  std::vector<Detection> out;
  std::size_t current = 0, count = 0;
  for (const auto& d : kept) {
    if (out.empty() || d.image != current) {
      current = d.image;
      count = 0;
    }
    if (count++ < config.max_detections) out.push_back(d);
  }
  return out;
}

std::vector<GroundTruth> ground_truths(const Dataset& dataset) {
  std::vector<GroundTruth> out;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Annotations& a = dataset.samples[i].labels;
    for (std::size_t k = 0; k < a.boxes.size(); ++k) out.push_back({i, a.classes[k], a.boxes[k]});
  }
  return out;
}

EvalResult evaluate(const Model& model, const Dataset& dataset, const EvalConfig& config) {
  config.validate();
  check_compatible(model, dataset);
  Model copy = model;
  const TargetGeometry geometry = TargetGeometry::of(model.config(), dataset.spec.image_size);
  std::vector<Detection> detections;
  const std::size_t n = dataset.samples.size();
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
    idx.resize(std::min(config.batch_size, n - begin));
    std::iota(idx.begin(), idx.end(), begin);
    std::array<std::optional<Tensor>, 2> images;
    for (int i = 0; i < 2; ++i) {
      if (copy.has_branch(i)) images[i] = stack_images(dataset, idx, i);
    }
    const HeadOutput out =
        predict(copy, {images[0] ? &*images[0] : nullptr, images[1] ? &*images[1] : nullptr});
    auto batch = decode_detections(out, geometry, begin, config);
    detections.insert(detections.end(), batch.begin(), batch.end());
  }
  return evaluate_detections(detections, ground_truths(dataset), model.config().classes);
}

ProbeResult linear_probe(const Model& model, int branch, const Dataset& train_set, const Dataset& test_set,
                         const OptimizerConfig& opt, const LossWeights& weights, const EvalConfig& eval) {
  if (branch < 0 || branch > 1 || !model.has_branch(branch)) {
    throw std::invalid_argument(fmt::format("linear_probe: model has no branch {}", branch));
  }
  ModelConfig cfg = model.config();
  cfg.mode = branch == 0 ? ModelMode::kUnimodalM1 : ModelMode::kUnimodalM2;
  Model probe(cfg, model.seed());
  probe.backbones[branch] = *model.backbones[branch];
  probe.backbones[branch]->set_frozen(true);
  const std::string head_name = fmt::format("head.m{}", branch + 1);
  probe.heads[branch].emplace(head_name, cfg.backbone.pyramid_widths(), cfg.classes, cfg.class_prior,
                              derive_seed(model.seed(), "probe." + head_name), cfg.init_gain);

  LossWeights w = weights;
  w.alpha = w.beta = w.gamma = 1.0;
  run_training(probe, route::RoutePlan::rsc_md(), w, opt, train_set, derive_seed(model.seed(), "probe"));

  ProbeResult r;
  r.branch = branch;
  r.checkpoint_id = checkpoint_digest(model);
  r.eval = evaluate(probe, test_set, eval);
  r.ap50 = r.eval.mean_ap50;
  r.ap50_95 = r.eval.mean_ap50_95;
  return r;
}

double GradientRatios::ratio(int branch) const {
  for (std::size_t k = 0; k < branches.size(); ++k) {
    if (branches[k] == branch) return ratios[k];
  }
  throw std::out_of_range(fmt::format("no gradient ratio for branch {}", branch));
}

GradientRatios gradient_ratio_report(const GradientTrace& a, const GradientTrace& b) {
  GradientRatios r;
  r.branches = a.branches();
  if (r.branches != b.branches()) throw TrainingError("gradient_ratio_report: traces cover different branches");
  for (int br : r.branches) r.ratios.push_back(a.mean_probe_norm(br) / b.mean_probe_norm(br));
  return r;
}

}  // namespace fdl
