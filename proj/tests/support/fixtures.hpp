#pragma once

#include "fdl/detector.hpp"
#include "fdl/synthgen.hpp"
#include "fdl/trainer.hpp"

#include <random>

namespace fdl::testing {

inline constexpr std::size_t kImage = 64;

struct Batch {
  Tensor m1;
  Tensor m2;
  std::vector<Annotations> labels;
  DetectionTargets targets;

  std::array<const Tensor*, 2> images() const { return {&m1, &m2}; }
};

inline Annotations random_annotations(std::mt19937_64& rng, std::size_t classes, std::size_t image = kImage) {
  std::uniform_int_distribution<int> count(1, 3), cls(0, static_cast<int>(classes) - 1);
  std::uniform_real_distribution<double> size(6.0, 40.0), unit(0.0, 1.0);
  Annotations a;
  const int n = count(rng);
  for (int k = 0; k < n; ++k) {
    const double w = size(rng), h = size(rng);
    a.boxes.push_back({unit(rng) * (static_cast<double>(image) - w), unit(rng) * (static_cast<double>(image) - h), w, h});
    a.classes.push_back(cls(rng));
  }
  return a;
}

inline Batch random_batch(std::mt19937_64& rng, const ModelConfig& config, std::size_t n = 2) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Batch b;
  b.m1 = Tensor({n, 1, kImage, kImage});
  b.m2 = Tensor({n, 1, kImage, kImage});
  for (std::size_t i = 0; i < b.m1.size(); ++i) {
    b.m1[i] = u(rng);
    b.m2[i] = u(rng);
  }
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(random_annotations(rng, config.classes));
  std::vector<const Annotations*> ptrs;
  for (const auto& l : b.labels) ptrs.push_back(&l);
  b.targets = assign_targets(ptrs, TargetGeometry::of(config, kImage));
  return b;
}

inline ModelConfig model_config(ModelMode mode) {
  ModelConfig c;
  c.mode = mode;
  return c;
}

// Gradient snapshot of every parameter, keyed by position.
inline std::vector<Tensor> grads_of(const std::vector<ad::Parameter*>& params) {
  std::vector<Tensor> out;
  for (const auto* p : params) out.push_back(p->grad);
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return (a.data() - b.data()).cwiseAbs().maxCoeff(); }

// Small synthetic dataset for training-loop tests.
inline Dataset tiny_dataset(std::uint64_t seed, std::size_t count, std::uint64_t first = 0) {
  SceneSpec spec;
  spec.image_size = kImage;
  spec.max_object_size = 36.0;
  spec.seed = seed;
  return generate_dataset(spec, ModalityProfile::from_quality(0.4), ModalityProfile::from_quality(0.8), first, count);
}

}  // namespace fdl::testing
