#include "fdl/route.hpp"

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

#include <fmt/format.h>
#include <gtest/gtest.h>

#include <map>

using namespace fdl;
using fdl::testing::random_tensor;

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

VarPyramid leaves(ad::Tape& tape, std::mt19937_64& rng) {
  VarPyramid p;
  std::size_t extent = 8;
  for (auto& v : p) {
    v = tape.variable(random_tensor(rng, {1, 2, extent, extent}));
    extent /= 2;
  }
  return p;
}

ad::Var pyramid_loss(ad::Tape& tape, const VarPyramid& p, std::mt19937_64& rng) {
  ad::Var acc = fdl::testing::project(tape, p[0], rng);
  for (std::size_t l = 1; l < kPyramidLevels; ++l) acc = acc + fdl::testing::project(tape, p[l], rng);
  return acc;
}

bool no_grad(const VarPyramid& p) {
  for (const auto& v : p) {
    if (v.grad() && v.grad()->norm() != 0.0) return false;
  }
  return true;
}

// Backward of the model loss from zeroed gradients; returns the graph.
ForwardGraph run(Model& model, const fdl::testing::Batch& b, const route::RoutePlan& plan, const LossWeights& w,
                 ad::Tape& tape) {
  auto params = model.parameters();
  zero_grads(params);
  auto g = forward_train(model, tape, b.images(), b.targets, plan, w);
  tape.backward(g.total);
  return g;
}

}  // namespace

TEST(Route, StopAndRouteExamples) {
  EXPECT_EQ(route::stop_and_route(0, 0), 1);
  EXPECT_EQ(route::stop_and_route(0, 1), 0);
  EXPECT_EQ(route::stop_and_route(1, 2), 0);
  EXPECT_EQ(route::stop_and_route(1, 1), 1);
  EXPECT_THROW(route::stop_and_route(2, 0), ad::ContractError);
  EXPECT_THROW(route::stop_and_route(0, 3), ad::ContractError);
  EXPECT_THROW(route::stop_and_route(-1, 0), ad::ContractError);
}

TEST(Route, PresetsAndNames) {
  for (const char* name : {"baseline", "rsc", "rsc-md"}) EXPECT_EQ(route::RoutePlan::preset(name).name(), name);
  EXPECT_THROW(route::RoutePlan::preset("md"), std::invalid_argument);
  const auto md = route::RoutePlan::rsc_md();
  for (int j = 0; j < route::kOutputs; ++j)
    for (int i = 0; i < route::kInputs; ++i) EXPECT_EQ(md.coefficient(j, i), route::stop_and_route(i, j));
  route::RoutePlan custom = md;
  custom.pass[2][0] = 1;
  EXPECT_EQ(custom.name(), "custom");
  custom.pass[0][1] = 2;
  EXPECT_THROW(custom.validate(), std::invalid_argument);
}

TEST(Route, ViewsAreBitwiseIdentity) {
  std::mt19937_64 rng(1);
  for (const char* name : {"baseline", "rsc", "rsc-md"}) {
    ad::Tape tape;
    auto f1 = leaves(tape, rng), f2 = leaves(tape, rng);
    auto v = route::route_forward(f1, f2, route::RoutePlan::preset(name));
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      EXPECT_TRUE(bit_equal(v.aux1[l].value(), f1[l].value()));
      EXPECT_TRUE(bit_equal(v.aux2[l].value(), f2[l].value()));
      EXPECT_TRUE(bit_equal(v.fusion.first[l].value(), f1[l].value()));
      EXPECT_TRUE(bit_equal(v.fusion.second[l].value(), f2[l].value()));
    }
  }
}

TEST(Route, FusionOnlyBackwardReachesNoInput) {
  std::mt19937_64 rng(2);
  ad::Tape tape;
  auto f1 = leaves(tape, rng), f2 = leaves(tape, rng);
  auto v = route::route_forward(f1, f2, route::RoutePlan::rsc_md());
  VarPyramid fused;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) fused[l] = v.fusion.first[l] * v.fusion.second[l];
  tape.backward(pyramid_loss(tape, fused, rng));
  EXPECT_TRUE(no_grad(f1));
  EXPECT_TRUE(no_grad(f2));
  EXPECT_EQ(v.emitted_norm(route::kFusionOutput, 0), 0.0);
}

TEST(Route, AuxBackwardReachesOnlyItsInput) {
  std::mt19937_64 rng(3);
  for (const char* name : {"rsc", "rsc-md"}) {
    ad::Tape tape;
    auto f1 = leaves(tape, rng), f2 = leaves(tape, rng);
    auto v = route::route_forward(f1, f2, route::RoutePlan::preset(name));
    tape.backward(pyramid_loss(tape, v.aux1, rng));
    EXPECT_FALSE(no_grad(f1));
    EXPECT_TRUE(no_grad(f2));
  }
}

TEST(Route, EffectiveGradientExamples) {
  std::mt19937_64 rng(4);
  auto pyr = [&] {
    FeaturePyramid p;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) p.levels[l] = random_tensor(rng, {1, 2, 4, 4});
    return p;
  };
  const auto a1 = pyr(), a2 = pyr();
  const route::FusionGradient fus{pyr(), pyr()};
  auto [g1, g2] = route::effective_gradient(route::RoutePlan::rsc_md(), a1, a2, fus);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    EXPECT_TRUE(bit_equal(g1.levels[l], a1.levels[l]));
    EXPECT_TRUE(bit_equal(g2.levels[l], a2.levels[l]));
  }
  route::RoutePlan ones;
  for (auto& row : ones.pass) row = {1, 1};
  std::tie(g1, g2) = route::effective_gradient(ones, a1, a2, fus);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    EXPECT_LE(fdl::testing::max_abs_diff(g1.levels[l], Tensor(a1.levels[l].shape(),
                                                              a1.levels[l].data() + fus.m1.levels[l].data())),
              0.0);
    EXPECT_LE(fdl::testing::max_abs_diff(g2.levels[l], Tensor(a2.levels[l].shape(),
                                                              a2.levels[l].data() + fus.m2.levels[l].data())),
              0.0);
  }
  std::tie(g1, g2) = route::effective_gradient(route::RoutePlan{}, a1, a2, fus);
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    EXPECT_EQ(g1.levels[l].norm(), 0.0);
    EXPECT_EQ(g2.levels[l].norm(), 0.0);
  }
  route::FusionGradient bad = fus;
  bad.m1.levels[1] = Tensor::zeros({1, 3, 4, 4});
  EXPECT_THROW(route::effective_gradient(route::RoutePlan::rsc_md(), a1, a2, bad), ShapeError);
}

// The following run the full detector.

TEST(RouteModel, FusionLossNeverReachesBackbonesUnderMd) {
  std::mt19937_64 rng(5);
  Model model(fdl::testing::model_config(ModelMode::kFusion), 17);
  LossWeights w;
  w.beta = 0.0;
  w.gamma = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    auto b = fdl::testing::random_batch(rng, model.config());
    ad::Tape tape;
    run(model, b, route::RoutePlan::rsc_md(), w, tape);
    double fusion_grad = 0.0;
    for (auto* p : model.parameters()) {
      if (starts_with(p->name, "backbone.")) {
        EXPECT_EQ(p->grad.norm(), 0.0) << p->name;
      } else if (starts_with(p->name, "fusion") || starts_with(p->name, "head.fusion")) {
        fusion_grad += p->grad.norm();
      }
    }
    EXPECT_GT(fusion_grad, 0.0);
  }
}

TEST(RouteModel, MdBranchGradientsEqualStandaloneUnimodal) {
  std::mt19937_64 rng(6);
  Model fused(fdl::testing::model_config(ModelMode::kFusion), 23);
  for (int branch = 0; branch < 2; ++branch) {
    Model solo(fdl::testing::model_config(branch == 0 ? ModelMode::kUnimodalM1 : ModelMode::kUnimodalM2), 23);
    auto b = fdl::testing::random_batch(rng, fused.config());
    ad::Tape t1, t2;
    run(fused, b, route::RoutePlan::rsc_md(), LossWeights{}, t1);
    run(solo, b, route::RoutePlan::rsc_md(), LossWeights{}, t2);
    const std::string prefix = fmt::format("backbone.m{}", branch + 1);
    std::map<std::string, const ad::Parameter*> solo_params;
    for (const auto* p : solo.parameters()) solo_params[p->name] = p;
    std::size_t compared = 0;
    for (const auto* p : fused.parameters()) {
      if (!starts_with(p->name, prefix)) continue;
      const auto* q = solo_params.at(p->name);
      ASSERT_TRUE(bit_equal(p->value, q->value));
      EXPECT_LE(fdl::testing::max_abs_diff(p->grad, q->grad), 1e-12) << p->name;
      ++compared;
    }
    EXPECT_GT(compared, 0u);
  }
}

TEST(RouteModel, MdIsForwardTransparent) {
  std::mt19937_64 rng(7);
  Model model(fdl::testing::model_config(ModelMode::kFusion), 29);
  for (int trial = 0; trial < 5; ++trial) {
    auto b = fdl::testing::random_batch(rng, model.config());
    ad::Tape t1, t2;
    auto g1 = forward_train(model, t1, b.images(), b.targets, route::RoutePlan::rsc(), LossWeights{});
    auto g2 = forward_train(model, t2, b.images(), b.targets, route::RoutePlan::rsc_md(), LossWeights{});
    EXPECT_TRUE(bit_equal(g1.total.value(), g2.total.value()));
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      EXPECT_TRUE(bit_equal(g1.fusion->logits[l].value(), g2.fusion->logits[l].value()));
      EXPECT_TRUE(bit_equal(g1.aux[0]->boxes[l].value(), g2.aux[0]->boxes[l].value()));
    }
  }
}

TEST(RouteModel, AuxLossIsolatedFromOtherBranchWithoutMd) {
  std::mt19937_64 rng(8);
  Model model(fdl::testing::model_config(ModelMode::kFusion), 31);
  LossWeights w;
  w.alpha = 0.0;
  w.gamma = 0.0;
  auto b = fdl::testing::random_batch(rng, model.config());
  ad::Tape tape;
  run(model, b, route::RoutePlan::rsc(), w, tape);
  double m1 = 0.0;
  for (const auto* p : model.parameters()) {
    if (starts_with(p->name, "backbone.m2")) EXPECT_EQ(p->grad.norm(), 0.0) << p->name;
    if (starts_with(p->name, "backbone.m1")) m1 += p->grad.norm();
  }
  EXPECT_GT(m1, 0.0);
}

TEST(RouteModel, TraceMaskingUnderMd) {
  std::mt19937_64 rng(9);
  Model model(fdl::testing::model_config(ModelMode::kFusion), 37);
  auto b = fdl::testing::random_batch(rng, model.config());
  ad::Tape tape;
  auto g = run(model, b, route::RoutePlan::rsc_md(), LossWeights{}, tape);
  EXPECT_EQ(g.views->emitted_norm(route::kFusionOutput, 0), 0.0);
  EXPECT_EQ(g.views->emitted_norm(route::kFusionOutput, 1), 0.0);
  EXPECT_GT(g.views->emitted_norm(0, 0), 0.0);
  ad::Tape t2;
  auto g2 = run(model, b, route::RoutePlan::rsc(), LossWeights{}, t2);
  EXPECT_GT(g2.views->emitted_norm(route::kFusionOutput, 0), 0.0);
}
