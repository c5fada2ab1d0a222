#pragma once

// Exhaustive reference for average precision on tiny instances: the ranking
// is found by searching every permutation of the detections, matching scans
// every ground truth, and the interpolated precision is taken literally as
// the maximum precision at any rank with recall at least as high.

#include "fdl/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

namespace fdl::testing {

inline double brute_force_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& truths,
                             double threshold) {
  if (truths.empty()) return 0.0;
  std::vector<std::size_t> perm(dets.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> ranking;
  // The accepted order is the unique permutation that is score-descending
  // with ties in input order.
  do {
    bool ok = true;
    for (std::size_t i = 1; i < perm.size() && ok; ++i) {
      const auto& a = dets[perm[i - 1]];
      const auto& b = dets[perm[i]];
      ok = a.score > b.score || (a.score == b.score && perm[i - 1] < perm[i]);
    }
    if (ok) {
      ranking = perm;
      break;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<bool> used(truths.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    const auto& d = dets[ranking[r]];
    std::ptrdiff_t pick = -1;
    double best = -1.0;
    for (std::size_t g = 0; g < truths.size(); ++g) {
      if (used[g] || truths[g].image != d.image) continue;
      const double o = iou(d.box, truths[g].box);
      if (o >= threshold && o > best) {
        best = o;
        pick = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (pick >= 0) {
      used[static_cast<std::size_t>(pick)] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truths.size()));
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    double interp = 0.0;
    for (std::size_t s = 0; s < ranking.size(); ++s) {
      if (recall[s] >= recall[r]) interp = std::max(interp, precision[s]);
    }
    ap += (recall[r] - prev) * interp;
    prev = recall[r];
  }
  return ap;
}

struct ApInstance {
  std::vector<Detection> detections;
  std::vector<GroundTruth> truths;
  std::size_t classes = 2;
};

// Up to 5 detections and 3 ground truths over two images; detections are
// jittered copies of the ground truths or free boxes, scores may tie.
inline ApInstance random_ap_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_gt(0, 3), n_det(0, 5), cls(0, 1), img(0, 1), coin(0, 2);
  std::uniform_real_distribution<double> pos(0.0, 40.0), size(5.0, 20.0), jitter(-3.0, 3.0);
  std::uniform_int_distribution<int> score_step(1, 6);
  ApInstance inst;
  const int g = n_gt(rng), d = n_det(rng);
  for (int k = 0; k < g; ++k) {
    inst.truths.push_back({static_cast<std::size_t>(img(rng)), cls(rng), {pos(rng), pos(rng), size(rng), size(rng)}});
  }
  for (int k = 0; k < d; ++k) {
    Detection det;
    det.score = 0.15 * score_step(rng);
    if (!inst.truths.empty() && coin(rng) != 0) {
      const auto& t = inst.truths[std::uniform_int_distribution<std::size_t>(0, inst.truths.size() - 1)(rng)];
      det.image = t.image;
      det.cls = coin(rng) == 0 ? 1 - t.cls : t.cls;
      det.box = {t.box.x + jitter(rng), t.box.y + jitter(rng), std::max(1.0, t.box.w + jitter(rng)),
                 std::max(1.0, t.box.h + jitter(rng))};
    } else {
      det.image = static_cast<std::size_t>(img(rng));
      det.cls = cls(rng);
      det.box = {pos(rng), pos(rng), size(rng), size(rng)};
    }
    inst.detections.push_back(det);
  }
  return inst;
}

// Mean AP50-95 over classes with ground truth, from the brute-force matcher.
inline EvalResult brute_force_eval(const ApInstance& inst) {
  EvalResult r;
  r.per_class_ap50.assign(inst.classes, 0.0);
  r.per_class_ap75.assign(inst.classes, 0.0);
  r.per_class_ap50_95.assign(inst.classes, 0.0);
  r.class_present.assign(inst.classes, false);
  std::size_t present = 0;
  for (std::size_t c = 0; c < inst.classes; ++c) {
    std::vector<Detection> d;
    std::vector<GroundTruth> t;
    for (const auto& x : inst.detections) if (static_cast<std::size_t>(x.cls) == c) d.push_back(x);
    for (const auto& x : inst.truths) if (static_cast<std::size_t>(x.cls) == c) t.push_back(x);
    r.class_present[c] = !t.empty();
    double acc = 0.0;
    for (std::size_t k = 0; k < kIouThresholdCount; ++k) {
      const double ap = brute_force_ap(d, t, 0.5 + 0.05 * static_cast<double>(k));
      acc += ap;
      if (k == 0) r.per_class_ap50[c] = ap;
      if (k == 5) r.per_class_ap75[c] = ap;
    }
    r.per_class_ap50_95[c] = acc / static_cast<double>(kIouThresholdCount);
    if (r.class_present[c]) {
      ++present;
      r.mean_ap50 += r.per_class_ap50[c];
      r.mean_ap75 += r.per_class_ap75[c];
      r.mean_ap50_95 += r.per_class_ap50_95[c];
    }
  }
  if (present > 0) {
    r.mean_ap50 /= static_cast<double>(present);
    r.mean_ap75 /= static_cast<double>(present);
    r.mean_ap50_95 /= static_cast<double>(present);
  }
  return r;
}

inline bool same_eval(const EvalResult& a, const EvalResult& b) {
  return a.per_class_ap50 == b.per_class_ap50 && a.per_class_ap75 == b.per_class_ap75 &&
         a.per_class_ap50_95 == b.per_class_ap50_95 && a.mean_ap50 == b.mean_ap50 && a.mean_ap75 == b.mean_ap75 &&
         a.mean_ap50_95 == b.mean_ap50_95 && a.class_present == b.class_present;
}

}  // namespace fdl::testing
