#include "fdl/gradient_theory.hpp"

#include "fdl/autodiff.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace fdl::theory {

namespace {

// Fixed projection rows standing in for W^{m1}, W^{m2}; features are chosen
// along these rows so that W f reproduces the requested logit exactly.
const Tensor kWeightM1({1, 4}, {0.5, -0.25, 1.0, 0.75});
const Tensor kWeightM2({1, 4}, {-0.4, 0.9, 0.3, 0.6});

Tensor features_for(const Tensor& row, double logit) {
  Tensor f({4, 1});
  f.data() = row.data() * (logit / row.squared_norm());
  return f;
}

std::vector<double> axis(double lo, double hi, double step) {
  std::vector<double> values;
  if (hi < lo) return values;
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) values.push_back(lo + static_cast<double>(i) * step);
  return values;
}

}  // namespace

double autodiff_crosscheck(const LogitDecomposition<double>& ld, SampleSign sign) {
  ad::Tape tape;
  auto w1 = tape.constant(kWeightM1);
  auto w2 = tape.constant(kWeightM2);
  auto f1 = tape.variable(features_for(kWeightM1, ld.m1_logit));
  auto f2 = tape.variable(features_for(kWeightM2, ld.m2_logit));
  auto b = tape.constant(Tensor::scalar(ld.bias));
  auto logit = ad::matmul(w1, f1) + ad::matmul(w2, f2) + b;
  const double y = sign == SampleSign::kPositive ? 1.0 : 0.0;
  // -[y log s + (1-y) log(1-s)] = softplus(z) - y z
  auto loss = ad::sum(ad::softplus(logit) - ad::scale(logit, y));
  tape.backward(loss);

  const Tensor& tape_grad = *f1.grad();
  const double factor = multimodal_factor(ld, sign);
  const Tensor::Storage closed = kWeightM1.data() * factor;
  const double denom = std::max(closed.norm(), std::numeric_limits<double>::min());
  return (tape_grad.data() - closed).norm() / denom;
}

void GridConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("grid step must be positive");
  if (!std::isfinite(min) || !std::isfinite(max)) throw std::invalid_argument("grid bounds must be finite");
  if (!std::isnan(partner_min) && !std::isfinite(partner_min)) {
    throw std::invalid_argument("grid partner_min must be finite");
  }
  for (double b : biases) {
    if (!std::isfinite(b)) throw std::invalid_argument("grid biases must be finite");
  }
  if (!(crosscheck_tolerance > 0.0)) throw std::invalid_argument("crosscheck tolerance must be positive");
}

std::vector<double> GridConfig::primary_axis() const { return axis(min, max, step); }

std::vector<double> GridConfig::partner_axis() const {
  return axis(std::isnan(partner_min) ? min : partner_min, max, step);
}

std::vector<SweepRow> sweep(const GridConfig& grid) {
  grid.validate();
  std::vector<SweepRow> rows;
  const auto m1_axis = grid.primary_axis();
  const auto m2_axis = grid.partner_axis();
  rows.reserve(m1_axis.size() * m2_axis.size() * grid.biases.size());
  for (double bias : grid.biases) {
    for (double m1 : m1_axis) {
      for (double m2 : m2_axis) {
        const LogitDecomposition<double> ld{m1, m2, bias};
        SweepRow r{};
        r.m1_logit = m1;
        r.m2_logit = m2;
        r.bias = bias;
        r.factors = gradient_factors(ld);
        const double fused = sigmoid(m1 + m2 + bias);
        r.gap_m1 = fused - sigmoid(m1 + bias);
        r.gap_m2 = fused - sigmoid(m2 + bias);
        const auto margins = suppression_margins(ld);
        // Both factor pairs coincide exactly at a zero partner logit.
        r.suppression_holds = m2 == 0.0 ? margins.positive >= 0.0 : margins.positive > 0.0;
        r.negative_holds = m2 == 0.0 ? margins.negative >= 0.0 : margins.negative > 0.0;
        if (m1 < m2) {
          r.ordering_holds = r.gap_m1 > r.gap_m2;
        } else if (m2 < m1) {
          r.ordering_holds = r.gap_m2 > r.gap_m1;
        } else {
          r.ordering_holds = true;
        }
        r.crosscheck_error = std::max(autodiff_crosscheck(ld, SampleSign::kPositive),
                                      autodiff_crosscheck(ld, SampleSign::kNegative));
        r.crosscheck_holds = r.crosscheck_error <= grid.crosscheck_tolerance;
        rows.push_back(r);
      }
    }
  }
  return rows;
}

SweepSummary summarize(const std::vector<SweepRow>& rows) {
  SweepSummary s;
  s.points = rows.size();
  for (const auto& r : rows) {
    s.suppression_failures += !r.suppression_holds;
    s.negative_failures += !r.negative_holds;
    s.ordering_failures += !r.ordering_holds;
    s.crosscheck_failures += !r.crosscheck_holds;
    s.max_crosscheck_error = std::max(s.max_crosscheck_error, r.crosscheck_error);
  }
  return s;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "m1_logit,m2_logit,bias,multimodal_positive,multimodal_negative,unimodal_positive,unimodal_negative,"
        "gap_m1,gap_m2,suppression_holds,negative_holds,ordering_holds,crosscheck_error,crosscheck_holds\n";
  for (const auto& r : rows) {
    os << fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{},{},{},{:.6e},{}\n",
                      r.m1_logit, r.m2_logit, r.bias, r.factors.multimodal_positive, r.factors.multimodal_negative,
                      r.factors.unimodal_positive, r.factors.unimodal_negative, r.gap_m1, r.gap_m2,
                      int(r.suppression_holds), int(r.negative_holds), int(r.ordering_holds), r.crosscheck_error,
                      int(r.crosscheck_holds));
  }
}

}  // namespace fdl::theory
