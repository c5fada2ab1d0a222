#pragma once

// Two-branch detector: per-modality SiLU conv backbones producing a
// three-level pyramid, linear naive-addition fusion, and a shared head
// architecture used for the fusion head and both auxiliary heads.

#include "fdl/autodiff.hpp"
#include "fdl/box.hpp"
#include "fdl/route.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& pointer, const std::string& message)
      : std::invalid_argument(pointer.empty() ? message : pointer + ": " + message), pointer_(pointer) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

struct BackboneConfig {
  std::size_t input_channels = 1;
  // Stride-2 stem convolutions ahead of the pyramid stages.
  std::vector<std::size_t> stem_widths{4, 8};
  // Stride-2 stages; the last three form the pyramid.
  std::vector<std::size_t> stage_widths{8, 16, 32};
  // Index into stage_widths of the stage whose gradients are traced.
  std::size_t probe_stage_index = 2;

  void validate() const;
  std::size_t downsampling() const;
  std::array<std::size_t, kPyramidLevels> pyramid_widths() const;
  std::array<std::size_t, kPyramidLevels> strides() const;
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class ModelMode { kFusion, kUnimodalM1, kUnimodalM2 };

const char* mode_name(ModelMode mode);
ModelMode parse_mode(const std::string& name);

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t classes = 3;
  ModelMode mode = ModelMode::kFusion;
  // Initial foreground probability encoded in the class-projection bias.
  double class_prior = 0.01;
  // An object goes to the first level with max(w, h) < band_scale * stride.
  double band_scale = 3.0;
  // Box width/height are regressed in units of box_unit * stride.
  double box_unit = 4.0;
  // Weights are drawn from uniform(-k, k), k = init_gain / sqrt(fan_in).
  double init_gain = 2.449489742783178;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LossWeights {
  double lambda_box = 1.0;
  double lambda_cls = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Conv + bias; weight ~ uniform(-k, k), k = gain / sqrt(fan_in), bias zero.
struct ConvLayer {
  ad::Parameter weight;
  ad::Parameter bias;
  ad::Conv2dOptions options;

  ConvLayer() = default;
  ConvLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, ad::Conv2dOptions options,
            std::uint64_t seed, double gain = 1.0);
  ad::Var forward(ad::Tape& tape, ad::Var x);
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const std::string& name, const BackboneConfig& config, std::uint64_t seed, double gain = 1.0);

  // image [N, input_channels, H, W]; every layer is stride-2 conv + SiLU.
  VarPyramid forward(ad::Tape& tape, ad::Var image);
  std::vector<ad::Parameter*> parameters();
  void set_frozen(bool frozen);
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  std::vector<ConvLayer> layers_;
};

// z = W1 f1 + W2 f2 + b per level, each W a 1x1 convolution; no activation.
class FusionLayer {
 public:
  FusionLayer() = default;
  FusionLayer(const std::string& name, const std::array<std::size_t, kPyramidLevels>& widths, std::uint64_t seed,
              double gain = 1.0);

  VarPyramid forward(ad::Tape& tape, const VarPyramid& f1, const VarPyramid& f2);
  std::vector<ad::Parameter*> parameters();
  // W1 = W2 = I, b = 0: plain element-wise addition.
  void set_identity();

  std::array<ad::Parameter, kPyramidLevels> w1;
  std::array<ad::Parameter, kPyramidLevels> w2;
  std::array<ad::Parameter, kPyramidLevels> bias;
};

struct HeadVars {
  VarPyramid logits;  // [N, classes, H, W]
  VarPyramid boxes;   // [N, 4, H, W]: dx, dy in cell units, w, h in box_unit*stride
};

struct HeadOutput {
  std::array<Tensor, kPyramidLevels> logits;
  std::array<Tensor, kPyramidLevels> boxes;
};

HeadOutput values_of(const HeadVars& vars);

// Per level: two 3x3 conv + SiLU layers, then 1x1 projections to class
// logits and box offsets.
class Head {
 public:
  Head() = default;
  Head(const std::string& name, const std::array<std::size_t, kPyramidLevels>& widths, std::size_t classes,
       double class_prior, std::uint64_t seed, double gain = 1.0);

  HeadVars forward(ad::Tape& tape, const VarPyramid& features);
  std::vector<ad::Parameter*> parameters();
  const std::array<std::size_t, kPyramidLevels>& widths() const { return widths_; }
  std::size_t classes() const { return classes_; }

 private:
  struct Level {
    ConvLayer conv1;
    ConvLayer conv2;
    ConvLayer cls;
    ConvLayer box;
  };
  std::array<std::size_t, kPyramidLevels> widths_{};
  std::size_t classes_ = 0;
  std::array<Level, kPyramidLevels> levels_;
};

struct TargetGeometry {
  std::size_t image_size = 96;
  std::size_t classes = 3;
  std::array<std::size_t, kPyramidLevels> strides{8, 16, 32};
  double band_scale = 3.0;
  double box_unit = 4.0;

  static TargetGeometry of(const ModelConfig& config, std::size_t image_size);
  std::size_t level_for(const Box& box) const;
  std::size_t cells(std::size_t level) const { return image_size / strides[level]; }
};

struct LevelTargets {
  Tensor cls;   // [N, classes, H, W] in {0, 1}
  Tensor box;   // [N, 4, H, W]
  Tensor mask;  // [N, 4, H, W], 1 on positive cells
  std::size_t positives = 0;
};

struct DetectionTargets {
  std::array<LevelTargets, kPyramidLevels> levels;
  std::size_t classification_entries = 0;
  std::size_t positives = 0;
};

// Center-cell assignment at the level whose size band contains the box.
// When two boxes share a cell, both classes are set and the larger box keeps
// the regression target.
DetectionTargets assign_targets(const std::vector<const Annotations*>& batch, const TargetGeometry& geometry);

std::array<double, 4> encode_box(const Box& box, std::size_t level, const TargetGeometry& geometry);
Box decode_box(std::size_t row, std::size_t col, std::size_t level, const std::array<double, 4>& offsets,
               const TargetGeometry& geometry);

struct LossParts {
  ad::Var total;
  ad::Var cls;
  std::optional<ad::Var> box;  // absent when the batch has no positive cell
};

// lambda_cls * mean BCE over every (cell, class) entry + lambda_box * mean L1
// over the offsets of positive cells.
LossParts detection_loss(const HeadVars& pred, const DetectionTargets& targets, const LossWeights& weights);

// alpha * fusion + beta * aux1 + gamma * aux2; zero-weight terms are skipped.
ad::Var rsc_total_loss(std::optional<ad::Var> fusion, std::optional<ad::Var> aux1, std::optional<ad::Var> aux2,
                       const LossWeights& weights);

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  bool is_fusion() const { return config_.mode == ModelMode::kFusion; }
  // Branch index served by a unimodal model.
  int unimodal_branch() const;
  bool has_branch(int branch) const { return backbones[branch].has_value(); }

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;

  std::array<std::optional<Backbone>, 2> backbones;
  std::optional<FusionLayer> fusion;
  std::optional<Head> fusion_head;
  // Auxiliary heads in fusion mode; the single detection head in unimodal mode.
  std::array<std::optional<Head>, 2> heads;

 private:
  ModelConfig config_;
  std::uint64_t seed_ = 0;
};

struct ForwardGraph {
  std::array<std::optional<VarPyramid>, 2> features;
  std::optional<route::RouteViews> views;
  std::optional<HeadVars> fusion;
  std::array<std::optional<HeadVars>, 2> aux;
  std::optional<ad::Var> fusion_loss;
  std::array<std::optional<ad::Var>, 2> aux_loss;
  ad::Var total;
};

// Records the full training graph. `images` holds one [N,C,H,W] batch per
// modality; a unimodal model reads only its own.
ForwardGraph forward_train(Model& model, ad::Tape& tape, const std::array<const Tensor*, 2>& images,
                           const DetectionTargets& targets, const route::RoutePlan& plan, const LossWeights& weights);

// Detection head output used at inference: the fusion head for fusion models.
HeadOutput predict(Model& model, const std::array<const Tensor*, 2>& images);

// Checkpoint: checkpoint.bin holds every named parameter, checkpoint.json
// records config, seed, parameter listing and the binary's SHA-256.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);
// SHA-256 of the encoded parameter tensors.
std::string checkpoint_digest(const Model& model);

}  // namespace fdl
