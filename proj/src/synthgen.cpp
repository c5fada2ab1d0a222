#include "fdl/synthgen.hpp"

#include "fdl/json_io.hpp"
#include "fdl/tensor_file.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace fdl {

namespace {

constexpr double kBackgroundM1 = 0.3;
constexpr double kBackgroundM2 = 0.15;
constexpr double kMaxOverlap = 0.2;
constexpr int kPlacementTries = 50;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct ObjectDraw {
  Box box;
  int cls = 0;
  Visibility visible;
  double m1_intensity = 0.8;
  double texture_angle = 0.0;
  double texture_period = 6.0;
  double texture_phase = 0.0;
  double m2_intensity = 0.85;
};

bool inside(const ObjectDraw& o, double px, double py) {
  const Box& b = o.box;
  if (px < b.x || px >= b.x + b.w || py < b.y || py >= b.y + b.h) return false;
  const double cx = b.cx(), cy = b.cy();
  switch (o.cls) {
    case 0:
      return true;
    case 1: {
      const double dx = (px - cx) / (0.5 * b.w), dy = (py - cy) / (0.5 * b.h);
      return dx * dx + dy * dy <= 1.0;
    }
    case 2:
      return std::abs(px - cx) <= 0.5 * b.w * (py - b.y) / b.h;
    default:
      return std::abs(px - cx) <= b.w / 6.0 || std::abs(py - cy) <= b.h / 6.0;
  }
}

void degrade(Tensor& image, const ModalityProfile& p, double background, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < image.size(); ++i) {
    double v = background + p.contrast * (image[i] - background);
    // Always draw so the noise stream does not depend on the profile.
    const double n = noise(rng);
    v += p.noise_sigma * n;
    image[i] = std::clamp(v, 0.0, 1.0);
  }
}

Tensor box_blur(const Tensor& image, std::size_t size) {
  Tensor out(image.shape());
  const auto s = static_cast<std::ptrdiff_t>(size);
  for (std::ptrdiff_t y = 0; y < s; ++y) {
    for (std::ptrdiff_t x = 0; x < s; ++x) {
      double acc = 0.0;
      int n = 0;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          const auto yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= s || xx >= s) continue;
          acc += image[static_cast<std::size_t>(yy * s + xx)];
          ++n;
        }
      }
      out[static_cast<std::size_t>(y * s + x)] = acc / n;
    }
  }
  return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix(splitmix(seed) ^ (stream * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream) {
  // FNV-1a of the label, then mixed with the seed.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return derive_seed(seed, h);
}

void SceneSpec::validate(std::size_t downsampling) const {
  if (image_size == 0) throw std::invalid_argument("image_size must be positive");
  if (downsampling > 0 && image_size % downsampling != 0) {
    throw std::invalid_argument(
        fmt::format("image_size {} is not divisible by the backbone downsampling {}", image_size, downsampling));
  }
  if (min_objects == 0 || max_objects < min_objects) {
    throw std::invalid_argument("object_count range must satisfy 1 <= min <= max");
  }
  if (class_count == 0 || class_count > kMaxShapeClasses) {
    throw std::invalid_argument(fmt::format("class_count must be in [1, {}]", kMaxShapeClasses));
  }
  if (!(min_object_size >= 2.0) || max_object_size < min_object_size ||
      max_object_size > static_cast<double>(image_size)) {
    throw std::invalid_argument("object_size range must satisfy 2 <= min <= max <= image_size");
  }
}

ModalityProfile ModalityProfile::from_quality(double quality) {
  if (!(quality >= 0.0 && quality <= 1.0)) throw std::invalid_argument("quality must be in [0, 1]");
  const double loss = (1.0 - quality) / 0.6;
  ModalityProfile p;
  p.quality = quality;
  p.noise_sigma = 0.25 * loss;
  p.contrast = std::max(1.0 - 0.5 * loss, 0.05);
  p.dropout_prob = std::min(0.15 * loss, 1.0);
  if (quality == 1.0) {
    p.noise_sigma = 0.0;
    p.contrast = 1.0;
    p.dropout_prob = 0.0;
  }
  return p;
}

void ModalityProfile::validate() const {
  if (!(quality >= 0.0 && quality <= 1.0)) throw std::invalid_argument("quality must be in [0, 1]");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("noise_sigma must be >= 0");
  if (!(contrast > 0.0 && contrast <= 1.0)) throw std::invalid_argument("contrast must be in (0, 1]");
  if (!(dropout_prob >= 0.0 && dropout_prob <= 1.0)) throw std::invalid_argument("dropout_prob must be in [0, 1]");
  if (quality == 1.0 && (noise_sigma != 0.0 || contrast != 1.0 || dropout_prob != 0.0)) {
    throw std::invalid_argument("quality 1 requires noise_sigma 0, contrast 1 and dropout_prob 0");
  }
}

ModalitySample generate_sample(const SceneSpec& spec, const ModalityProfile& m1, const ModalityProfile& m2,
                               std::uint64_t index) {
  spec.validate();
  m1.validate();
  m2.validate();
  const std::uint64_t base = derive_seed(spec.seed, index);
  std::mt19937_64 layout(derive_seed(base, "layout"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(layout); };

  const auto size = static_cast<long>(spec.image_size);
  const long min_size = static_cast<long>(std::ceil(spec.min_object_size));
  const long max_size = static_cast<long>(std::floor(spec.max_object_size));
  const auto count = static_cast<std::size_t>(
      uniform_int(static_cast<long>(spec.min_objects), static_cast<long>(spec.max_objects)));

  std::vector<ObjectDraw> objects;
  for (std::size_t k = 0; k < count; ++k) {
    ObjectDraw o;
    o.cls = static_cast<int>(uniform_int(0, static_cast<long>(spec.class_count) - 1));
    // Appearance and visibility draws happen before placement so every object
    // consumes the same number of values regardless of retries.
    o.m1_intensity = 0.65 + 0.3 * unit(layout);
    o.texture_angle = std::numbers::pi * unit(layout);
    o.texture_period = 4.0 + 6.0 * unit(layout);
    o.texture_phase = 2.0 * std::numbers::pi * unit(layout);
    o.m2_intensity = 0.7 + 0.3 * unit(layout);
    const double u1 = unit(layout), u2 = unit(layout), u3 = unit(layout);
    o.visible.m1 = u1 >= m1.dropout_prob;
    o.visible.m2 = u2 >= m2.dropout_prob;
    if (!o.visible.m1 && !o.visible.m2) {
      if (m1.dropout_prob < m2.dropout_prob) {
        o.visible.m1 = true;
      } else if (m2.dropout_prob < m1.dropout_prob) {
        o.visible.m2 = true;
      } else {
        (u3 < 0.5 ? o.visible.m1 : o.visible.m2) = true;
      }
    }
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      const long w = uniform_int(min_size, max_size);
      const long h = (o.cls == 1 || o.cls == 3) ? w : uniform_int(min_size, max_size);
      const long x = uniform_int(0, size - w);
      const long y = uniform_int(0, size - h);
      o.box = Box{double(x), double(y), double(w), double(h)};
      placed = std::all_of(objects.begin(), objects.end(),
                           [&](const ObjectDraw& other) { return iou(other.box, o.box) <= kMaxOverlap; });
    }
    if (placed || objects.empty()) objects.push_back(o);
  }

  const Shape shape{1, spec.image_size, spec.image_size};
  Tensor img1(shape), img2(shape);
  const double f1x = 0.01 + 0.04 * unit(layout), f1y = 0.01 + 0.04 * unit(layout);
  const double f2x = 0.005 + 0.015 * unit(layout), f2y = 0.005 + 0.015 * unit(layout);
  const double phase1 = 2.0 * std::numbers::pi * unit(layout), phase2 = 2.0 * std::numbers::pi * unit(layout);
  for (long py = 0; py < size; ++py) {
    for (long px = 0; px < size; ++px) {
      const double x = double(px) + 0.5, y = double(py) + 0.5;
      double v1 = kBackgroundM1 + 0.06 * std::sin(2.0 * std::numbers::pi * (f1x * x + f1y * y) + phase1);
      double v2 = kBackgroundM2 + 0.04 * std::sin(2.0 * std::numbers::pi * (f2x * x + f2y * y) + phase2);
      for (const auto& o : objects) {
        if (!inside(o, x, y)) continue;
        if (o.visible.m1) {
          const double t = (x * std::cos(o.texture_angle) + y * std::sin(o.texture_angle)) / o.texture_period;
          v1 = o.m1_intensity + 0.12 * std::sin(2.0 * std::numbers::pi * t + o.texture_phase);
        }
        if (o.visible.m2) v2 = std::max(v2, o.m2_intensity);
      }
      const auto i = static_cast<std::size_t>(py * size + px);
      img1[i] = v1;
      img2[i] = v2;
    }
  }
  img2 = box_blur(box_blur(img2, spec.image_size), spec.image_size);

  std::mt19937_64 noise1(derive_seed(base, "noise.m1"));
  std::mt19937_64 noise2(derive_seed(base, "noise.m2"));
  degrade(img1, m1, kBackgroundM1, noise1);
  degrade(img2, m2, kBackgroundM2, noise2);

  ModalitySample s;
  s.index = index;
  s.image_m1 = std::move(img1);
  s.image_m2 = std::move(img2);
  for (const auto& o : objects) {
    s.labels.boxes.push_back(o.box);
    s.labels.classes.push_back(o.cls);
    s.visibility.push_back(o.visible);
  }
  return s;
}

Dataset generate_dataset(const SceneSpec& spec, const ModalityProfile& m1, const ModalityProfile& m2,
                         std::uint64_t first_index, std::size_t count) {
  Dataset d{spec, m1, m2, first_index, {}};
  d.samples.reserve(count);
  for (std::size_t k = 0; k < count; ++k) d.samples.push_back(generate_sample(spec, m1, m2, first_index + k));
  return d;
}

namespace {

using json_io::Json;

std::string sample_stem(std::uint64_t index) { return fmt::format("sample_{:05d}", index); }

Json annotation_json(const ModalitySample& s) {
  Json boxes = Json::array(), vis = Json::array();
  for (const auto& b : s.labels.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
  for (const auto& v : s.visibility) vis.push_back({v.m1, v.m2});
  return {{"index", s.index}, {"boxes", boxes}, {"classes", s.labels.classes}, {"visibility", vis}};
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  Json samples = Json::array();
  for (const auto& s : dataset.samples) {
    const std::string stem = sample_stem(s.index);
    const std::string tensors = encode_tensors({{"m1", s.image_m1}, {"m2", s.image_m2}});
    const std::string notes = annotation_json(s).dump(1) + "\n";
    write_file_bytes(dir / (stem + ".bin"), tensors);
    write_file_bytes(dir / (stem + ".json"), notes);
    samples.push_back({{"index", s.index},
                       {"tensors", stem + ".bin"},
                       {"annotations", stem + ".json"},
                       {"sha256_tensors", sha256_hex(tensors)},
                       {"sha256_annotations", sha256_hex(notes)}});
  }
  Json manifest = {{"format_version", kDatasetFormatVersion},
                   {"spec", json_io::to_json(dataset.spec)},
                   {"profiles", {{"m1", json_io::to_json(dataset.m1)}, {"m2", json_io::to_json(dataset.m2)}}},
                   {"first_index", dataset.first_index},
                   {"count", dataset.samples.size()},
                   {"samples", samples}};
  write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::string dataset_digest(const Dataset& dataset) {
  std::string joined;
  for (const auto& s : dataset.samples) {
    joined += sha256_hex(encode_tensors({{"m1", s.image_m1}, {"m2", s.image_m2}}));
    joined += sha256_hex(annotation_json(s).dump(1) + "\n");
  }
  return sha256_hex(joined);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DatasetError("missing dataset manifest " + manifest_path.string());
  Json manifest;
  try {
    manifest = Json::parse(read_file_bytes(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw DatasetError(fmt::format("{}: dataset format version {} is not supported (expected {})",
                                     manifest_path.string(), version, kDatasetFormatVersion));
    }
    Dataset d;
    d.spec = json_io::scene_spec_from(manifest.at("spec"), "/spec");
    d.m1 = json_io::profile_from(manifest.at("profiles").at("m1"), "/profiles/m1");
    d.m2 = json_io::profile_from(manifest.at("profiles").at("m2"), "/profiles/m2");
    d.first_index = manifest.at("first_index").get<std::uint64_t>();
    const auto count = manifest.at("count").get<std::size_t>();
    const Json& entries = manifest.at("samples");
    if (entries.size() != count) {
      throw DatasetError(fmt::format("{}: manifest lists {} samples but count is {}", manifest_path.string(),
                                     entries.size(), count));
    }
    for (const auto& e : entries) {
      const auto tensor_path = dir / e.at("tensors").get<std::string>();
      const auto notes_path = dir / e.at("annotations").get<std::string>();
      for (const auto& p : {tensor_path, notes_path}) {
        if (!std::filesystem::exists(p)) throw DatasetError("missing sample file " + p.string());
      }
      const std::string tensors = read_file_bytes(tensor_path);
      const std::string notes = read_file_bytes(notes_path);
      if (sha256_hex(tensors) != e.at("sha256_tensors").get<std::string>()) {
        throw DatasetError("checksum mismatch (corrupt file) " + tensor_path.string());
      }
      if (sha256_hex(notes) != e.at("sha256_annotations").get<std::string>()) {
        throw DatasetError("checksum mismatch (corrupt file) " + notes_path.string());
      }
      ModalitySample s;
      s.index = e.at("index").get<std::uint64_t>();
      for (auto& [name, t] : decode_tensors(tensors, tensor_path.string())) {
        if (name == "m1") s.image_m1 = std::move(t);
        else if (name == "m2") s.image_m2 = std::move(t);
        else throw DatasetError(tensor_path.string() + ": unexpected tensor '" + name + "'");
      }
      const Json a = Json::parse(notes);
      for (const auto& b : a.at("boxes")) {
        s.labels.boxes.push_back(Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                     b.at(3).get<double>()});
      }
      s.labels.classes = a.at("classes").get<std::vector<int>>();
      for (const auto& v : a.at("visibility")) s.visibility.push_back({v.at(0).get<bool>(), v.at(1).get<bool>()});
      if (s.labels.boxes.size() != s.labels.classes.size() || s.visibility.size() != s.labels.classes.size()) {
        throw DatasetError(notes_path.string() + ": boxes, classes and visibility lengths differ");
      }
      d.samples.push_back(std::move(s));
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed dataset in " + dir.string() + ": " + e.what());
  } catch (const TensorFileError& e) {
    throw DatasetError(std::string("corrupt sample tensor: ") + e.what());
  }
}

}  // namespace fdl
