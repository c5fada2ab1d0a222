#pragma once

#include "fdl/autodiff.hpp"

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <utility>

namespace fdl {

// Three pyramid levels, finest first; the last one is the probe stage.
inline constexpr std::size_t kPyramidLevels = 3;

using VarPyramid = std::array<ad::Var, kPyramidLevels>;

struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> levels;
};

namespace route {

inline constexpr int kInputs = 2;   // backbone m1, backbone m2
inline constexpr int kOutputs = 3;  // aux head m1, aux head m2, fusion
inline constexpr int kFusionOutput = 2;

// Gradient coefficient from output branch `output_index` back to input branch
// `input_index` under the decoupling rule: 1 iff the indices coincide.
int stop_and_route(int input_index, int output_index);

// pass[j][i] is the gradient coefficient from output j to input i.
struct RoutePlan {
  std::array<std::array<int, kInputs>, kOutputs> pass{};

  static RoutePlan baseline();  // fusion passes to both backbones, aux rows closed
  static RoutePlan rsc();       // every path passes
  static RoutePlan rsc_md();    // output j passes only to input j
  static RoutePlan preset(std::string_view name);

  // Preset name when the matrix matches one, else "custom".
  std::string name() const;
  void validate() const;
  int coefficient(int output, int input) const { return pass.at(output).at(input); }

  friend bool operator==(const RoutePlan&, const RoutePlan&) = default;
};

// Whether output j consumes input i at all: aux heads see only their own
// modality, the fusion branch sees both.
constexpr bool consumes(int output, int input) { return output == kFusionOutput || output == input; }

struct RouteViews {
  VarPyramid aux1;
  VarPyramid aux2;
  std::pair<VarPyramid, VarPyramid> fusion;
  // emitted[j][i][level]: gradient passed from output j into input i on the
  // last backward pass; null where output j does not consume input i.
  std::array<std::array<std::array<std::shared_ptr<Tensor>, kPyramidLevels>, kInputs>, kOutputs> emitted;

  // L2 norm of everything output j passed into input i on the last backward.
  double emitted_norm(int output, int input) const;
};

RouteViews route_forward(const VarPyramid& f1, const VarPyramid& f2, const RoutePlan& plan);

struct FusionGradient {
  FeaturePyramid m1;
  FeaturePyramid m2;
};

// Gradient each backbone receives given the upstream gradients at the three
// outputs: g_i = sum_j pass[j][i] * upstream_j restricted to modality i.
std::pair<FeaturePyramid, FeaturePyramid> effective_gradient(const RoutePlan& plan, const FeaturePyramid& aux1,
                                                             const FeaturePyramid& aux2,
                                                             const FusionGradient& fusion);

}  // namespace route
}  // namespace fdl
