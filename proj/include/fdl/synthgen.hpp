#pragma once

// Deterministic paired two-modality detection scenes. Modality 1 renders
// textured filled shapes, modality 2 renders soft intensity silhouettes; each
// image is then degraded according to its ModalityProfile.

#include "fdl/box.hpp"
#include "fdl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fdl {

inline constexpr int kDatasetFormatVersion = 1;
// Rectangle, disc, triangle, cross.
inline constexpr std::size_t kMaxShapeClasses = 4;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneSpec {
  std::size_t image_size = 96;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  std::size_t class_count = 3;
  std::uint64_t seed = 0;
  double min_object_size = 10.0;
  double max_object_size = 56.0;

  // `downsampling` is the total backbone stride the images must divide by.
  void validate(std::size_t downsampling = 1) const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct ModalityProfile {
  double quality = 1.0;
  double noise_sigma = 0.0;
  double contrast = 1.0;
  double dropout_prob = 0.0;

  // Linear degradation with quality; quality 0.4 gives noise 0.25,
  // contrast 0.5 and dropout 0.15, quality 1 gives a clean modality.
  static ModalityProfile from_quality(double quality);
  void validate() const;
  friend bool operator==(const ModalityProfile&, const ModalityProfile&) = default;
};

struct Visibility {
  bool m1 = true;
  bool m2 = true;
  friend bool operator==(const Visibility&, const Visibility&) = default;
};

struct ModalitySample {
  std::uint64_t index = 0;
  Tensor image_m1;  // [1, size, size]
  Tensor image_m2;
  Annotations labels;
  std::vector<Visibility> visibility;
};

ModalitySample generate_sample(const SceneSpec& spec, const ModalityProfile& m1, const ModalityProfile& m2,
                               std::uint64_t index);

struct Dataset {
  SceneSpec spec;
  ModalityProfile m1;
  ModalityProfile m2;
  std::uint64_t first_index = 0;
  std::vector<ModalitySample> samples;

  std::size_t size() const { return samples.size(); }
};

// Samples [first_index, first_index + count).
Dataset generate_dataset(const SceneSpec& spec, const ModalityProfile& m1, const ModalityProfile& m2,
                         std::uint64_t first_index, std::size_t count);

// Layout: manifest.json plus sample_NNNNN.bin (tensors "m1", "m2") and
// sample_NNNNN.json (boxes, classes, visibility) per sample.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);
// SHA-256 over the per-sample checksums, in sample order.
std::string dataset_digest(const Dataset& dataset);

// Deterministic 64-bit mix of a seed and a stream label.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream);

}  // namespace fdl
