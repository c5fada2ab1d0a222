#pragma once

// Closed-form backbone gradient factors for a two-modality detector whose
// fused classification logit is the sum of per-modality contributions plus a
// bias, trained with sigmoid binary cross-entropy.

#include <cmath>
#include <iosfwd>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl::theory {

class PremiseError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class SampleSign { kPositive, kNegative };
enum class Modality { kM1, kM2 };

template <typename Scalar>
struct LogitDecomposition {
  Scalar m1_logit{};  // W^{m1} f^{m1}
  Scalar m2_logit{};  // W^{m2} f^{m2}
  Scalar bias{};      // b1 + b2 collapsed
};

template <typename Scalar>
struct GradientFactors {
  Scalar multimodal_positive{};
  Scalar multimodal_negative{};
  Scalar unimodal_positive{};
  Scalar unimodal_negative{};
  Scalar detection_scale{1};
};

template <typename Scalar>
struct SuppressionGap {
  Modality modality = Modality::kM1;
  Scalar gap{};
};

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

namespace detail {
template <typename Scalar>
void require_finite(Scalar v, const char* what) {
  using std::isfinite;
  if (!isfinite(v)) throw std::invalid_argument(std::string(what) + " must be finite");
}

template <typename Scalar>
Scalar bce_factor(Scalar logit, SampleSign sign) {
  const Scalar s = sigmoid(logit);
  return sign == SampleSign::kPositive ? s - Scalar(1) : s;
}
}  // namespace detail

// dL/dz of sigmoid-BCE at the fused logit; multiply by W^{m1} (and the head
// scale) to obtain the gradient reaching branch 1.
template <typename Scalar>
Scalar multimodal_factor(const LogitDecomposition<Scalar>& ld, SampleSign sign) {
  detail::require_finite(ld.m1_logit, "m1 logit");
  detail::require_finite(ld.m2_logit, "m2 logit");
  detail::require_finite(ld.bias, "bias");
  return detail::bce_factor(ld.m1_logit + ld.m2_logit + ld.bias, sign);
}

template <typename Scalar>
Scalar unimodal_factor(Scalar logit, Scalar bias, SampleSign sign) {
  detail::require_finite(logit, "logit");
  detail::require_finite(bias, "bias");
  return detail::bce_factor(logit + bias, sign);
}

// Factors seen by branch 1, scaled by the (positive) detection-module magnitude.
template <typename Scalar>
GradientFactors<Scalar> gradient_factors(const LogitDecomposition<Scalar>& ld, Scalar detection_scale = Scalar(1)) {
  if (!(detection_scale > Scalar(0))) throw std::invalid_argument("detection scale must be positive");
  GradientFactors<Scalar> f;
  f.detection_scale = detection_scale;
  f.multimodal_positive = detection_scale * multimodal_factor(ld, SampleSign::kPositive);
  f.multimodal_negative = detection_scale * multimodal_factor(ld, SampleSign::kNegative);
  f.unimodal_positive = detection_scale * unimodal_factor(ld.m1_logit, ld.bias, SampleSign::kPositive);
  f.unimodal_negative = detection_scale * unimodal_factor(ld.m1_logit, ld.bias, SampleSign::kNegative);
  return f;
}

template <typename Scalar>
struct SuppressionMargins {
  // |unimodal positive| - |multimodal positive|
  Scalar positive{};
  // multimodal negative - unimodal negative
  Scalar negative{};
};

// Unchecked margins; valid for any partner logit, including negative ones.
template <typename Scalar>
SuppressionMargins<Scalar> suppression_margins(const LogitDecomposition<Scalar>& ld) {
  using std::abs;
  const auto f = gradient_factors(ld);
  return {abs(f.unimodal_positive) - abs(f.multimodal_positive), f.multimodal_negative - f.unimodal_negative};
}

template <typename Scalar>
bool margins_hold(const SuppressionMargins<Scalar>& m, Scalar partner_logit) {
  if (partner_logit > Scalar(0)) return m.positive > Scalar(0) && m.negative > Scalar(0);
  return m.positive >= Scalar(0) && m.negative >= Scalar(0);
}

// Positive-sample suppression together with the negative-sample corollary.
// Strict when the partner contributes a positive logit; at a zero partner
// logit both factor pairs coincide and the check holds with margin 0.
template <typename Scalar>
bool check_suppression(const LogitDecomposition<Scalar>& ld) {
  if (ld.m2_logit < Scalar(0)) {
    throw PremiseError("check_suppression: partner logit " + std::to_string(static_cast<double>(ld.m2_logit)) +
                       " violates the SiLU nonnegativity premise");
  }
  return margins_hold(suppression_margins(ld), ld.m2_logit);
}

template <typename Scalar>
struct GapOrdering {
  SuppressionGap<Scalar> weak;
  SuppressionGap<Scalar> strong;
  bool weak_suppressed_more = false;
};

// Positive-sample gap sigma(l_weak + l_strong + b) - sigma(l_self + b) for each
// modality; the weaker modality (smaller logit contribution) loses more.
template <typename Scalar>
GapOrdering<Scalar> weak_modality_gap_ordering(Scalar weak_logit, Scalar strong_logit, Scalar bias,
                                               Modality weak_modality = Modality::kM1) {
  detail::require_finite(weak_logit, "weak logit");
  detail::require_finite(strong_logit, "strong logit");
  detail::require_finite(bias, "bias");
  if (weak_logit < Scalar(0)) throw PremiseError("weak_modality_gap_ordering: weak logit must be nonnegative");
  if (!(weak_logit < strong_logit)) {
    throw std::invalid_argument("weak_modality_gap_ordering: weak logit must be strictly below strong logit");
  }
  const Scalar fused = sigmoid(weak_logit + strong_logit + bias);
  GapOrdering<Scalar> r;
  r.weak = {weak_modality, fused - sigmoid(weak_logit + bias)};
  r.strong = {weak_modality == Modality::kM1 ? Modality::kM2 : Modality::kM1, fused - sigmoid(strong_logit + bias)};
  r.weak_suppressed_more = r.weak.gap > r.strong.gap;
  return r;
}

// Relative error between the tape gradient of the literal two-logit BCE graph
// with respect to the m1 features and multimodal_factor * W^{m1}.
double autodiff_crosscheck(const LogitDecomposition<double>& ld, SampleSign sign);

struct GridConfig {
  double min = 0.0;
  double max = 5.0;
  double step = 0.1;
  // Lower bound of the partner (m2) axis; defaults to `min`.
  double partner_min = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> biases{-1.0, 0.0, 1.0};
  double crosscheck_tolerance = 1e-8;

  void validate() const;
  std::vector<double> primary_axis() const;
  std::vector<double> partner_axis() const;
};

struct SweepRow {
  double m1_logit;
  double m2_logit;
  double bias;
  GradientFactors<double> factors;
  double gap_m1;
  double gap_m2;
  bool suppression_holds;  // positive-sample inequality
  bool negative_holds;     // negative-sample corollary
  bool ordering_holds;     // weaker modality has the larger gap (vacuous when logits tie)
  double crosscheck_error;
  bool crosscheck_holds;

  bool ok() const { return suppression_holds && negative_holds && ordering_holds && crosscheck_holds; }
};

struct SweepSummary {
  std::size_t points = 0;
  std::size_t suppression_failures = 0;
  std::size_t negative_failures = 0;
  std::size_t ordering_failures = 0;
  std::size_t crosscheck_failures = 0;
  double max_crosscheck_error = 0.0;

  std::size_t counterexamples() const {
    return suppression_failures + negative_failures + ordering_failures + crosscheck_failures;
  }
};

std::vector<SweepRow> sweep(const GridConfig& grid);
SweepSummary summarize(const std::vector<SweepRow>& rows);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace fdl::theory
