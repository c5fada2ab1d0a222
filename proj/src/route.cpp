#include "fdl/route.hpp"

#include <fmt/format.h>

#include <cmath>
#include <stdexcept>

namespace fdl::route {

int stop_and_route(int input_index, int output_index) {
  if (input_index < 0 || input_index >= kInputs) {
    throw ad::ContractError(fmt::format("stop_and_route: input index {} outside [0,{})", input_index, kInputs));
  }
  if (output_index < 0 || output_index >= kOutputs) {
    throw ad::ContractError(fmt::format("stop_and_route: output index {} outside [0,{})", output_index, kOutputs));
  }
  return input_index == output_index ? 1 : 0;
}

RoutePlan RoutePlan::baseline() {
  RoutePlan p;
  p.pass[kFusionOutput] = {1, 1};
  return p;
}

RoutePlan RoutePlan::rsc() {
  RoutePlan p;
  for (auto& row : p.pass) row = {1, 1};
  return p;
}

RoutePlan RoutePlan::rsc_md() {
  RoutePlan p;
  for (int j = 0; j < kOutputs; ++j) {
    for (int i = 0; i < kInputs; ++i) p.pass[j][i] = stop_and_route(i, j);
  }
  return p;
}

RoutePlan RoutePlan::preset(std::string_view name) {
  if (name == "baseline") return baseline();
  if (name == "rsc") return rsc();
  if (name == "rsc-md") return rsc_md();
  throw std::invalid_argument(fmt::format("unknown route preset '{}' (expected baseline, rsc or rsc-md)", name));
}

std::string RoutePlan::name() const {
  if (*this == baseline()) return "baseline";
  if (*this == rsc()) return "rsc";
  if (*this == rsc_md()) return "rsc-md";
  return "custom";
}

void RoutePlan::validate() const {
  for (int j = 0; j < kOutputs; ++j) {
    for (int i = 0; i < kInputs; ++i) {
      if (pass[j][i] != 0 && pass[j][i] != 1) {
        throw std::invalid_argument(fmt::format("route plan entry [{}][{}] = {} is not 0 or 1", j, i, pass[j][i]));
      }
    }
  }
}

double RouteViews::emitted_norm(int output, int input) const {
  double sq = 0.0;
  for (const auto& t : emitted.at(output).at(input)) {
    if (t) sq += t->squared_norm();
  }
  return std::sqrt(sq);
}

RouteViews route_forward(const VarPyramid& f1, const VarPyramid& f2, const RoutePlan& plan) {
  plan.validate();
  RouteViews views;
  const std::array<const VarPyramid*, kInputs> inputs{&f1, &f2};
  auto view = [&](int output, int input) {
    VarPyramid out;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      auto slot = std::make_shared<Tensor>();
      views.emitted[output][input][l] = slot;
      out[l] = ad::gate((*inputs[input])[l], plan.coefficient(output, input), slot);
    }
    return out;
  };
  views.aux1 = view(0, 0);
  views.aux2 = view(1, 1);
  views.fusion = {view(kFusionOutput, 0), view(kFusionOutput, 1)};
  return views;
}

namespace {

void check_same(const FeaturePyramid& a, const FeaturePyramid& b, const char* what) {
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    if (a.levels[l].shape() != b.levels[l].shape()) {
      throw ShapeError(fmt::format("effective_gradient: {} level {} shape {} does not match {}", what, l,
                                   to_string(a.levels[l].shape()), to_string(b.levels[l].shape())));
    }
  }
}

FeaturePyramid combine(int coef_a, const FeaturePyramid& a, int coef_b, const FeaturePyramid& b) {
  FeaturePyramid out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    out.levels[l] = Tensor(a.levels[l].shape());
    if (coef_a) out.levels[l].data() += a.levels[l].data();
    if (coef_b) out.levels[l].data() += b.levels[l].data();
  }
  return out;
}

}  // namespace

std::pair<FeaturePyramid, FeaturePyramid> effective_gradient(const RoutePlan& plan, const FeaturePyramid& aux1,
                                                             const FeaturePyramid& aux2,
                                                             const FusionGradient& fusion) {
  plan.validate();
  check_same(aux1, fusion.m1, "aux1 vs fusion m1");
  check_same(aux2, fusion.m2, "aux2 vs fusion m2");
  return {combine(plan.coefficient(0, 0), aux1, plan.coefficient(kFusionOutput, 0), fusion.m1),
          combine(plan.coefficient(1, 1), aux2, plan.coefficient(kFusionOutput, 1), fusion.m2)};
}

}  // namespace fdl::route
