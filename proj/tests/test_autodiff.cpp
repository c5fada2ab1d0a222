#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

using namespace fdl;
using fdl::testing::random_tensor;

namespace {

// Direct seven-loop convolution.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, ad::Conv2dOptions o) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * o.padding - k) / o.stride + 1, wo = (wd + 2 * o.padding - k) / o.stride + 1;
  Tensor y({n, cout, ho, wo});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t c = 0; c < wo; ++c) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long yy = static_cast<long>(r * o.stride + i) - static_cast<long>(o.padding);
                const long xx = static_cast<long>(c * o.stride + j) - static_cast<long>(o.padding);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                acc += w.at(co, ci, i, j) * x.at(s, ci, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              }
          y.at(s, co, r, c) = acc;
        }
  return y;
}

}  // namespace

class OpGradcheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradcheck, HundredRandomGraphsMatchFiniteDifferences) {
  const auto op = fdl::testing::op_cases().at(GetParam());
  std::mt19937_64 rng(1000 + GetParam());
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) worst = std::max(worst, fdl::testing::gradcheck(op.make(rng)));
  EXPECT_LE(worst, 1e-6) << op.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradcheck, ::testing::Range<std::size_t>(0, fdl::testing::op_cases().size()),
                         [](const auto& info) { return fdl::testing::op_cases().at(info.param).name; });

TEST(Autodiff, ComposedGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor proj = random_tensor(rng, {2, 2, 2, 2});
    fdl::testing::GraphCase c{
        [proj](ad::Tape& t, const std::vector<ad::Var>& v) {
          auto y = ad::silu(ad::conv2d(v[0], v[1], v[2], {2, 1}));
          auto z = ad::sigmoid(y) * ad::softplus(y) - ad::scale(y, 0.3);
          return ad::mean(ad::mul(z, t.constant(proj))) + ad::sum(ad::slice(z, 1, 0, 1));
        },
        {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3, 3, 3}), random_tensor(rng, {2})}};
    EXPECT_LE(fdl::testing::gradcheck(c), 1e-6);
  }
}

TEST(Autodiff, ConvMatchesNaiveLoops) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = fdl::testing::pick(rng, 1, 3), cin = fdl::testing::pick(rng, 1, 4);
    const std::size_t cout = fdl::testing::pick(rng, 1, 4), k = fdl::testing::pick(rng, 0, 1) ? 3 : 1;
    ad::Conv2dOptions o{fdl::testing::pick(rng, 1, 2), fdl::testing::pick(rng, 0, k / 2)};
    const std::size_t hw = fdl::testing::pick(rng, k, 9);
    Tensor x = random_tensor(rng, {n, cin, hw, hw}), w = random_tensor(rng, {cout, cin, k, k});
    Tensor b = random_tensor(rng, {cout});
    ad::Tape tape;
    auto y = ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), o).value();
    Tensor ref = naive_conv(x, w, b, o);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE((y.data() - ref.data()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Autodiff, ConvShapeErrors) {
  ad::Tape tape;
  auto x = tape.constant(Tensor::zeros({1, 2, 4, 4}));
  EXPECT_THROW(ad::conv2d(x, tape.constant(Tensor::zeros({1, 3, 3, 3})), tape.constant(Tensor::zeros({1})), {}),
               ShapeError);
  EXPECT_THROW(ad::conv2d(x, tape.constant(Tensor::zeros({1, 2, 5, 5})), tape.constant(Tensor::zeros({1})), {}),
               ShapeError);
  EXPECT_THROW(ad::conv2d(x, tape.constant(Tensor::zeros({2, 2, 1, 1})), tape.constant(Tensor::zeros({1})), {}),
               ShapeError);
}

TEST(Autodiff, ElementwiseShapeMismatchThrows) {
  ad::Tape tape;
  EXPECT_THROW(tape.constant(Tensor::zeros({2, 3})) + tape.constant(Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(ad::matmul(tape.constant(Tensor::zeros({2, 3})), tape.constant(Tensor::zeros({2, 3}))), ShapeError);
}

TEST(Autodiff, BackwardRequiresScalarOnSameTape) {
  ad::Tape a, b;
  auto x = a.variable(Tensor::full({2}, 1.0));
  EXPECT_THROW(a.backward(x), ad::ContractError);
  auto y = b.variable(Tensor::scalar(1.0));
  EXPECT_THROW(a.backward(y), ad::ContractError);
  EXPECT_THROW(x + y, ad::ContractError);
  EXPECT_THROW(ad::silu(ad::Var{}), ad::ContractError);
}

TEST(Autodiff, ParameterGradientsAccumulateAcrossPasses) {
  ad::Parameter p("p", Tensor({2}, {1.0, -2.0}));
  for (int pass = 0; pass < 2; ++pass) {
    ad::Tape tape;
    auto v = tape.parameter(p);
    tape.backward(ad::sum(v * v));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -8.0);
}

TEST(Autodiff, FrozenParameterIsAConstant) {
  ad::Parameter p("p", Tensor({2}, {1.0, 2.0}));
  p.frozen = true;
  ad::Tape tape;
  auto v = tape.parameter(p);
  auto x = tape.variable(Tensor({2}, {3.0, 4.0}));
  tape.backward(ad::sum(v * x));
  EXPECT_FALSE(v.requires_grad());
  EXPECT_EQ(p.grad.norm(), 0.0);
  EXPECT_DOUBLE_EQ((*x.grad())[1], 2.0);
}

TEST(Autodiff, RepeatedBackwardResetsNodeGradients) {
  ad::Tape tape;
  auto x = tape.variable(Tensor::scalar(3.0));
  auto y = x * x;
  tape.backward(y);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()->item(), 6.0);
}

TEST(Autodiff, GateScalesAndBlocks) {
  for (double c : {0.0, 0.5, 1.0, 2.0}) {
    ad::Tape tape;
    auto x = tape.variable(Tensor({3}, {1.0, -1.0, 2.0}));
    auto emitted = std::make_shared<Tensor>();
    auto g = ad::gate(x, c, emitted);
    EXPECT_TRUE(bit_equal(g.value(), x.value()));
    tape.backward(ad::sum(g * tape.constant(Tensor({3}, {1.0, 2.0, 3.0}))));
    if (c == 0.0) {
      EXPECT_FALSE(x.grad().has_value());
    } else {
      ASSERT_TRUE(x.grad().has_value());
      EXPECT_DOUBLE_EQ((*x.grad())[2], 3.0 * c);
      EXPECT_DOUBLE_EQ((*emitted)[1], 2.0 * c);
    }
  }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  ad::Tape tape;
  auto x = tape.variable(Tensor::scalar(2.0));
  auto y = ad::sigmoid(x);
  auto z = y * y + y;
  tape.backward(z);
  const double s = 1.0 / (1.0 + std::exp(-2.0));
  EXPECT_NEAR(x.grad()->item(), (2 * s + 1) * s * (1 - s), 1e-15);
}

TEST(Autodiff, StableAtLargeLogits) {
  ad::Tape tape;
  auto x = tape.variable(Tensor({2}, {800.0, -800.0}));
  auto y = ad::sum(ad::softplus(x) + ad::sigmoid(x));
  tape.backward(y);
  EXPECT_TRUE(y.value().all_finite());
  EXPECT_TRUE(x.grad()->all_finite());
  EXPECT_DOUBLE_EQ(y.value().item(), 801.0);
}
