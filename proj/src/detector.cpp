#include "fdl/detector.hpp"

#include "fdl/json_io.hpp"
#include "fdl/synthgen.hpp"
#include "fdl/tensor_file.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace fdl {

using ad::Var;

void BackboneConfig::validate() const {
  if (input_channels == 0) throw std::invalid_argument("input_channels must be positive");
  if (stage_widths.size() < kPyramidLevels) {
    throw std::invalid_argument(fmt::format("stage_widths needs at least {} stages, got {}", kPyramidLevels,
                                            stage_widths.size()));
  }
  for (auto w : stem_widths) {
    if (w == 0) throw std::invalid_argument("stem_widths entries must be positive");
  }
  for (auto w : stage_widths) {
    if (w == 0) throw std::invalid_argument("stage_widths entries must be positive");
  }
  if (probe_stage_index != stage_widths.size() - 1) {
    throw std::invalid_argument(
        fmt::format("probe_stage_index must be the final stage ({}), got {}", stage_widths.size() - 1,
                    probe_stage_index));
  }
}

std::size_t BackboneConfig::downsampling() const {
  return std::size_t{1} << (stem_widths.size() + stage_widths.size());
}

std::array<std::size_t, kPyramidLevels> BackboneConfig::pyramid_widths() const {
  std::array<std::size_t, kPyramidLevels> w{};
  const std::size_t first = stage_widths.size() - kPyramidLevels;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) w[l] = stage_widths[first + l];
  return w;
}

std::array<std::size_t, kPyramidLevels> BackboneConfig::strides() const {
  std::array<std::size_t, kPyramidLevels> s{};
  const std::size_t layers = stem_widths.size() + stage_widths.size();
  for (std::size_t l = 0; l < kPyramidLevels; ++l) s[l] = std::size_t{1} << (layers - kPyramidLevels + 1 + l);
  return s;
}

const char* mode_name(ModelMode mode) {
  switch (mode) {
    case ModelMode::kFusion: return "fusion";
    case ModelMode::kUnimodalM1: return "unimodal-m1";
    case ModelMode::kUnimodalM2: return "unimodal-m2";
  }
  return "?";
}

ModelMode parse_mode(const std::string& name) {
  if (name == "fusion") return ModelMode::kFusion;
  if (name == "unimodal-m1") return ModelMode::kUnimodalM1;
  if (name == "unimodal-m2") return ModelMode::kUnimodalM2;
  throw std::invalid_argument("unknown model mode '" + name + "' (expected fusion, unimodal-m1 or unimodal-m2)");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (classes == 0 || classes > kMaxShapeClasses) {
    throw std::invalid_argument(fmt::format("classes must be in [1, {}]", kMaxShapeClasses));
  }
  if (!(class_prior > 0.0 && class_prior < 1.0)) throw std::invalid_argument("class_prior must be in (0, 1)");
  if (!(band_scale > 0.0) || !std::isfinite(band_scale)) throw std::invalid_argument("band_scale must be positive");
  if (!(box_unit > 0.0) || !std::isfinite(box_unit)) throw std::invalid_argument("box_unit must be positive");
  if (!(init_gain > 0.0) || !std::isfinite(init_gain)) throw std::invalid_argument("init_gain must be positive");
}

void LossWeights::validate() const {
  const std::pair<const char*, double> fields[] = {
      {"lambda_box", lambda_box}, {"lambda_cls", lambda_cls}, {"alpha", alpha}, {"beta", beta}, {"gamma", gamma}};
  for (const auto& [name, v] : fields) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(fmt::format("{} must be >= 0, got {}", name, v));
  }
  if (lambda_box == 0.0 && lambda_cls == 0.0) {
    throw std::invalid_argument("lambda_box and lambda_cls cannot both be zero");
  }
  if (alpha == 0.0 && beta == 0.0 && gamma == 0.0) {
    throw std::invalid_argument("alpha, beta and gamma cannot all be zero");
  }
}

namespace {

Tensor uniform_tensor(Shape shape, double k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-k, k);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace

ConvLayer::ConvLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                     ad::Conv2dOptions opts, std::uint64_t seed, double gain)
    : options(opts) {
  const double k = gain / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = ad::Parameter(name + ".weight", uniform_tensor({out, in, kernel, kernel}, k, derive_seed(seed, name)));
  bias = ad::Parameter(name + ".bias", Tensor::zeros({out}));
}

Var ConvLayer::forward(ad::Tape& tape, Var x) {
  return ad::conv2d(x, tape.parameter(weight), tape.parameter(bias), options);
}

Backbone::Backbone(const std::string& name, const BackboneConfig& config, std::uint64_t seed, double gain)
    : config_(config) {
  config.validate();
  const std::uint64_t s = derive_seed(seed, name);
  std::size_t in = config.input_channels;
  auto add = [&](const char* kind, std::size_t k, std::size_t out) {
    layers_.emplace_back(fmt::format("{}.{}{}", name, kind, k), in, out, 3, ad::Conv2dOptions{2, 1}, s, gain);
    in = out;
  };
  for (std::size_t k = 0; k < config.stem_widths.size(); ++k) add("stem", k, config.stem_widths[k]);
  for (std::size_t k = 0; k < config.stage_widths.size(); ++k) add("stage", k, config.stage_widths[k]);
}

VarPyramid Backbone::forward(ad::Tape& tape, Var image) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != config_.input_channels) {
    throw ShapeError(fmt::format("backbone: expected [N, {}, H, W] input, got {}", config_.input_channels,
                                 to_string(s)));
  }
  const std::size_t d = config_.downsampling();
  if (s[2] % d != 0 || s[3] % d != 0) {
    throw ConfigError("", fmt::format("backbone: input {}x{} is not divisible by the downsampling factor {}", s[2],
                                      s[3], d));
  }
  VarPyramid out;
  Var x = image;
  const std::size_t first_level = layers_.size() - kPyramidLevels;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    x = ad::silu(layers_[k].forward(tape, x));
    if (k >= first_level) out[k - first_level] = x;
  }
  return out;
}

std::vector<ad::Parameter*> Backbone::parameters() {
  std::vector<ad::Parameter*> p;
  for (auto& l : layers_) {
    p.push_back(&l.weight);
    p.push_back(&l.bias);
  }
  return p;
}

void Backbone::set_frozen(bool frozen) {
  for (auto* p : parameters()) p->frozen = frozen;
}

FusionLayer::FusionLayer(const std::string& name, const std::array<std::size_t, kPyramidLevels>& widths,
                         std::uint64_t seed, double gain) {
  const std::uint64_t s = derive_seed(seed, name);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t c = widths[l];
    const double k = gain / std::sqrt(static_cast<double>(c));
    const std::string w1_name = fmt::format("{}.level{}.w1", name, l);
    const std::string w2_name = fmt::format("{}.level{}.w2", name, l);
    w1[l] = ad::Parameter(w1_name, uniform_tensor({c, c, 1, 1}, k, derive_seed(s, w1_name)));
    w2[l] = ad::Parameter(w2_name, uniform_tensor({c, c, 1, 1}, k, derive_seed(s, w2_name)));
    bias[l] = ad::Parameter(fmt::format("{}.level{}.bias", name, l), Tensor::zeros({c}));
  }
}

VarPyramid FusionLayer::forward(ad::Tape& tape, const VarPyramid& f1, const VarPyramid& f2) {
  VarPyramid z;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    if (f1[l].shape() != f2[l].shape()) {
      throw ShapeError(fmt::format("fuse: level {} shapes differ: {} vs {}", l, to_string(f1[l].shape()),
                                   to_string(f2[l].shape())));
    }
    const Var no_bias = tape.constant(Tensor::zeros({w2[l].value.dim(0)}));
    z[l] = ad::conv2d(f1[l], tape.parameter(w1[l]), tape.parameter(bias[l]), {}) +
           ad::conv2d(f2[l], tape.parameter(w2[l]), no_bias, {});
  }
  return z;
}

std::vector<ad::Parameter*> FusionLayer::parameters() {
  std::vector<ad::Parameter*> p;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    p.push_back(&w1[l]);
    p.push_back(&w2[l]);
    p.push_back(&bias[l]);
  }
  return p;
}

void FusionLayer::set_identity() {
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t c = w1[l].value.dim(0);
    w1[l].value.data().setZero();
    w2[l].value.data().setZero();
    for (std::size_t i = 0; i < c; ++i) {
      w1[l].value[i * c + i] = 1.0;
      w2[l].value[i * c + i] = 1.0;
    }
    bias[l].value.data().setZero();
  }
}

HeadOutput values_of(const HeadVars& vars) {
  HeadOutput out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    out.logits[l] = vars.logits[l].value();
    out.boxes[l] = vars.boxes[l].value();
  }
  return out;
}

Head::Head(const std::string& name, const std::array<std::size_t, kPyramidLevels>& widths, std::size_t classes,
           double class_prior, std::uint64_t seed, double gain)
    : widths_(widths), classes_(classes) {
  const std::uint64_t s = derive_seed(seed, name);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t c = widths[l];
    const std::string p = fmt::format("{}.level{}", name, l);
    levels_[l].conv1 = ConvLayer(p + ".conv1", c, c, 3, {1, 1}, s, gain);
    levels_[l].conv2 = ConvLayer(p + ".conv2", c, c, 3, {1, 1}, s, gain);
    levels_[l].cls = ConvLayer(p + ".cls", c, classes, 1, {}, s, gain);
    levels_[l].box = ConvLayer(p + ".box", c, 4, 1, {}, s, gain);
    levels_[l].cls.bias.value.data().setConstant(-std::log((1.0 - class_prior) / class_prior));
  }
}

HeadVars Head::forward(ad::Tape& tape, const VarPyramid& features) {
  HeadVars out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const Shape& s = features[l].shape();
    if (s.size() != 4 || s[1] != widths_[l]) {
      throw ShapeError(fmt::format("head: level {} expects {} channels, got shape {}", l, widths_[l],
                                   to_string(s)));
    }
    Level& lv = levels_[l];
    Var h = ad::silu(lv.conv1.forward(tape, features[l]));
    h = ad::silu(lv.conv2.forward(tape, h));
    out.logits[l] = lv.cls.forward(tape, h);
    out.boxes[l] = lv.box.forward(tape, h);
  }
  return out;
}

std::vector<ad::Parameter*> Head::parameters() {
  std::vector<ad::Parameter*> p;
  for (auto& lv : levels_) {
    for (ConvLayer* c : {&lv.conv1, &lv.conv2, &lv.cls, &lv.box}) {
      p.push_back(&c->weight);
      p.push_back(&c->bias);
    }
  }
  return p;
}

TargetGeometry TargetGeometry::of(const ModelConfig& config, std::size_t image_size) {
  TargetGeometry g;
  g.image_size = image_size;
  g.classes = config.classes;
  g.strides = config.backbone.strides();
  g.band_scale = config.band_scale;
  g.box_unit = config.box_unit;
  return g;
}

std::size_t TargetGeometry::level_for(const Box& box) const {
  const double extent = std::max(box.w, box.h);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    if (extent < band_scale * static_cast<double>(strides[l])) return l;
  }
  return kPyramidLevels - 1;
}

namespace {

std::pair<std::size_t, std::size_t> center_cell(const Box& box, std::size_t level, const TargetGeometry& g) {
  const double stride = static_cast<double>(g.strides[level]);
  const auto n = static_cast<double>(g.cells(level));
  const double col = std::clamp(std::floor(box.cx() / stride), 0.0, n - 1.0);
  const double row = std::clamp(std::floor(box.cy() / stride), 0.0, n - 1.0);
  return {static_cast<std::size_t>(row), static_cast<std::size_t>(col)};
}

}  // namespace

std::array<double, 4> encode_box(const Box& box, std::size_t level, const TargetGeometry& g) {
  const auto [row, col] = center_cell(box, level, g);
  const double stride = static_cast<double>(g.strides[level]);
  const double unit = g.box_unit * stride;
  return {box.cx() / stride - static_cast<double>(col), box.cy() / stride - static_cast<double>(row), box.w / unit,
          box.h / unit};
}

Box decode_box(std::size_t row, std::size_t col, std::size_t level, const std::array<double, 4>& o,
               const TargetGeometry& g) {
  const double stride = static_cast<double>(g.strides[level]);
  const double unit = g.box_unit * stride;
  const double cx = (static_cast<double>(col) + o[0]) * stride;
  const double cy = (static_cast<double>(row) + o[1]) * stride;
  const double w = std::max(o[2], 0.0) * unit;
  const double h = std::max(o[3], 0.0) * unit;
  return Box{cx - 0.5 * w, cy - 0.5 * h, w, h};
}

DetectionTargets assign_targets(const std::vector<const Annotations*>& batch, const TargetGeometry& g) {
  DetectionTargets t;
  const std::size_t n = batch.size();
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t c = g.cells(l);
    t.levels[l].cls = Tensor({n, g.classes, c, c});
    t.levels[l].box = Tensor({n, 4, c, c});
    t.levels[l].mask = Tensor({n, 4, c, c});
    t.classification_entries += n * g.classes * c * c;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Annotations& a = *batch[i];
    // Area of the box that currently owns each regression cell.
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> owner;
    for (std::size_t k = 0; k < a.boxes.size(); ++k) {
      const Box& b = a.boxes[k];
      const int cls = a.classes[k];
      if (cls < 0 || static_cast<std::size_t>(cls) >= g.classes) {
        throw std::invalid_argument(fmt::format("assign_targets: class {} outside class count {}", cls, g.classes));
      }
      const std::size_t l = g.level_for(b);
      const auto [row, col] = center_cell(b, l, g);
      LevelTargets& lt = t.levels[l];
      lt.cls.at(i, static_cast<std::size_t>(cls), row, col) = 1.0;
      const auto key = std::make_tuple(l, row, col);
      auto it = owner.find(key);
      if (it == owner.end()) {
        owner[key] = b.area();
        ++lt.positives;
        ++t.positives;
      } else if (b.area() > it->second) {
        it->second = b.area();
      } else {
        continue;
      }
      const auto enc = encode_box(b, l, g);
      for (std::size_t j = 0; j < 4; ++j) {
        lt.box.at(i, j, row, col) = enc[j];
        lt.mask.at(i, j, row, col) = 1.0;
      }
    }
  }
  return t;
}

LossParts detection_loss(const HeadVars& pred, const DetectionTargets& targets, const LossWeights& weights) {
  ad::Tape& tape = *pred.logits[0].tape();
  std::optional<Var> bce, l1;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const LevelTargets& lt = targets.levels[l];
    const Var x = pred.logits[l];
    const Var term = ad::sum(ad::softplus(x) - x * tape.constant(lt.cls));
    bce = bce ? *bce + term : term;
    if (lt.positives > 0) {
      const Var mask = tape.constant(lt.mask);
      const Var diff = ad::abs(pred.boxes[l] * mask - tape.constant(lt.box));
      const Var s = ad::sum(diff);
      l1 = l1 ? *l1 + s : s;
    }
  }
  LossParts parts;
  parts.cls = ad::scale(*bce, 1.0 / static_cast<double>(targets.classification_entries));
  parts.total = ad::scale(parts.cls, weights.lambda_cls);
  if (l1) {
    parts.box = ad::scale(*l1, 1.0 / (4.0 * static_cast<double>(targets.positives)));
    parts.total = parts.total + ad::scale(*parts.box, weights.lambda_box);
  }
  return parts;
}

Var rsc_total_loss(std::optional<Var> fusion, std::optional<Var> aux1, std::optional<Var> aux2,
                   const LossWeights& weights) {
  std::optional<Var> total;
  auto add = [&](const std::optional<Var>& term, double w) {
    if (!term || w == 0.0) return;
    const Var scaled = ad::scale(*term, w);
    total = total ? *total + scaled : scaled;
  };
  add(fusion, weights.alpha);
  add(aux1, weights.beta);
  add(aux2, weights.gamma);
  if (!total) throw ad::ContractError("rsc_total_loss: every term is absent or has zero weight");
  return *total;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config.validate();
  const auto widths = config.backbone.pyramid_widths();
  auto make_branch = [&](int i) {
    const std::string m = fmt::format("m{}", i + 1);
    backbones[i].emplace("backbone." + m, config.backbone, seed, config.init_gain);
    heads[i].emplace("head." + m, widths, config.classes, config.class_prior, seed, config.init_gain);
  };
  if (is_fusion()) {
    make_branch(0);
    make_branch(1);
    fusion.emplace("fusion", widths, seed, config.init_gain);
    // Training starts from plain element-wise addition.
    fusion->set_identity();
    fusion_head.emplace("head.fusion", widths, config.classes, config.class_prior, seed, config.init_gain);
  } else {
    make_branch(unimodal_branch());
  }
}

int Model::unimodal_branch() const {
  switch (config_.mode) {
    case ModelMode::kUnimodalM1: return 0;
    case ModelMode::kUnimodalM2: return 1;
    case ModelMode::kFusion: break;
  }
  throw ad::ContractError("unimodal_branch called on a fusion model");
}

std::vector<ad::Parameter*> Model::parameters() {
  std::vector<ad::Parameter*> p;
  auto append = [&](std::vector<ad::Parameter*> more) { p.insert(p.end(), more.begin(), more.end()); };
  for (auto& b : backbones) {
    if (b) append(b->parameters());
  }
  if (fusion) append(fusion->parameters());
  if (fusion_head) append(fusion_head->parameters());
  for (auto& h : heads) {
    if (h) append(h->parameters());
  }
  return p;
}

std::vector<const ad::Parameter*> Model::parameters() const {
  auto mutable_params = const_cast<Model*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

ForwardGraph forward_train(Model& model, ad::Tape& tape, const std::array<const Tensor*, 2>& images,
                           const DetectionTargets& targets, const route::RoutePlan& plan,
                           const LossWeights& weights) {
  ForwardGraph g;
  if (!model.is_fusion()) {
    const int i = model.unimodal_branch();
    g.features[i] = model.backbones[i]->forward(tape, tape.constant(*images[i]));
    g.aux[i] = model.heads[i]->forward(tape, *g.features[i]);
    g.aux_loss[i] = detection_loss(*g.aux[i], targets, weights).total;
    g.total = *g.aux_loss[i];
    return g;
  }
  for (int i = 0; i < 2; ++i) g.features[i] = model.backbones[i]->forward(tape, tape.constant(*images[i]));
  g.views = route::route_forward(*g.features[0], *g.features[1], plan);
  if (weights.alpha != 0.0) {
    const VarPyramid z = model.fusion->forward(tape, g.views->fusion.first, g.views->fusion.second);
    g.fusion = model.fusion_head->forward(tape, z);
    g.fusion_loss = detection_loss(*g.fusion, targets, weights).total;
  }
  const std::array<const VarPyramid*, 2> aux_views{&g.views->aux1, &g.views->aux2};
  const std::array<double, 2> aux_weights{weights.beta, weights.gamma};
  for (int i = 0; i < 2; ++i) {
    if (aux_weights[i] == 0.0) continue;
    g.aux[i] = model.heads[i]->forward(tape, *aux_views[i]);
    g.aux_loss[i] = detection_loss(*g.aux[i], targets, weights).total;
  }
  g.total = rsc_total_loss(g.fusion_loss, g.aux_loss[0], g.aux_loss[1], weights);
  return g;
}

HeadOutput predict(Model& model, const std::array<const Tensor*, 2>& images) {
  ad::Tape tape;
  if (!model.is_fusion()) {
    const int i = model.unimodal_branch();
    const VarPyramid f = model.backbones[i]->forward(tape, tape.constant(*images[i]));
    return values_of(model.heads[i]->forward(tape, f));
  }
  const VarPyramid f1 = model.backbones[0]->forward(tape, tape.constant(*images[0]));
  const VarPyramid f2 = model.backbones[1]->forward(tape, tape.constant(*images[1]));
  return values_of(model.fusion_head->forward(tape, model.fusion->forward(tape, f1, f2)));
}

namespace {

std::vector<NamedTensor> named_parameters(const Model& model) {
  std::vector<NamedTensor> out;
  for (const auto* p : model.parameters()) out.push_back({p->name, p->value});
  return out;
}

}  // namespace

std::string checkpoint_digest(const Model& model) { return sha256_hex(encode_tensors(named_parameters(model))); }

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto named = named_parameters(model);
  const std::string bytes = encode_tensors(named);
  write_file_bytes(dir / "checkpoint.bin", bytes);
  json_io::Json params = json_io::Json::array();
  for (const auto& n : named) params.push_back({{"name", n.name}, {"shape", n.tensor.shape()}});
  const json_io::Json manifest = {{"format_version", kTensorFileVersion},
                                  {"model", json_io::to_json(model.config())},
                                  {"seed", model.seed()},
                                  {"parameters", params},
                                  {"sha256", sha256_hex(bytes)}};
  write_file_bytes(dir / "checkpoint.json", manifest.dump(2) + "\n");
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const auto json_path = dir / "checkpoint.json";
  const auto bin_path = dir / "checkpoint.bin";
  for (const auto& p : {json_path, bin_path}) {
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing checkpoint file " + p.string());
  }
  const auto manifest = json_io::Json::parse(read_file_bytes(json_path));
  const std::string bytes = read_file_bytes(bin_path);
  if (sha256_hex(bytes) != manifest.at("sha256").get<std::string>()) {
    throw std::runtime_error("checkpoint checksum mismatch in " + bin_path.string());
  }
  Model model(json_io::model_from(manifest.at("model"), "/model"), manifest.at("seed").get<std::uint64_t>());
  std::map<std::string, Tensor> loaded;
  for (auto& [name, t] : decode_tensors(bytes, bin_path.string())) loaded.emplace(name, std::move(t));
  const auto params = model.parameters();
  if (loaded.size() != params.size()) {
    throw std::runtime_error(fmt::format("checkpoint {} has {} tensors, model expects {}", bin_path.string(),
                                         loaded.size(), params.size()));
  }
  for (auto* p : params) {
    auto it = loaded.find(p->name);
    if (it == loaded.end()) throw std::runtime_error("checkpoint is missing parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw ShapeError(fmt::format("checkpoint parameter {} has shape {}, expected {}", p->name,
                                   to_string(it->second.shape()), to_string(p->value.shape())));
    }
    p->value = it->second;
  }
  return model;
}

}  // namespace fdl
