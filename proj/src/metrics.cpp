#include "fdl/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fdl {

std::array<double, kIouThresholdCount> coco_iou_thresholds() {
  std::array<double, kIouThresholdCount> t{};
  for (std::size_t i = 0; i < kIouThresholdCount; ++i) t[i] = 0.5 + 0.05 * static_cast<double>(i);
  return t;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.image != b.image) return a.image < b.image;
    if (a.cls != b.cls) return a.cls < b.cls;
    return a.score > b.score;
  });
  std::vector<Detection> kept;
  std::size_t group_start = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const Detection& d = detections[i];
    if (i > 0 && (d.image != detections[i - 1].image || d.cls != detections[i - 1].cls)) group_start = kept.size();
    bool suppressed = false;
    for (std::size_t k = group_start; k < kept.size() && !suppressed; ++k) {
      suppressed = iou(kept[k].box, d.box) > iou_threshold;
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truths,
                         double iou_threshold) {
  if (truths.empty()) return 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> matched(truths.size(), false);
  std::vector<double> precision, recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = detections[order[rank]];
    double best = iou_threshold;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t g = 0; g < truths.size(); ++g) {
      if (matched[g] || truths[g].image != d.image) continue;
      const double o = iou(d.box, truths[g].box);
      if (o >= best) {
        // Ties keep the earliest ground truth.
        if (best_gt < 0 || o > best) {
          best = o;
          best_gt = static_cast<std::ptrdiff_t>(g);
        }
      }
    }
    if (best_gt >= 0) {
      matched[static_cast<std::size_t>(best_gt)] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truths.size()));
  }

  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truths,
                               std::size_t classes) {
  std::vector<std::vector<Detection>> dets(classes);
  std::vector<std::vector<GroundTruth>> gts(classes);
  for (const auto& d : detections) {
    if (d.cls < 0 || static_cast<std::size_t>(d.cls) >= classes) {
      throw std::invalid_argument("evaluate: detection class " + std::to_string(d.cls) + " outside class count " +
                                  std::to_string(classes));
    }
    dets[static_cast<std::size_t>(d.cls)].push_back(d);
  }
  for (const auto& g : truths) {
    if (g.cls < 0 || static_cast<std::size_t>(g.cls) >= classes) {
      throw std::invalid_argument("evaluate: ground-truth class " + std::to_string(g.cls) + " outside class count " +
                                  std::to_string(classes));
    }
    gts[static_cast<std::size_t>(g.cls)].push_back(g);
  }

  EvalResult r;
  r.per_class_ap50.assign(classes, 0.0);
  r.per_class_ap75.assign(classes, 0.0);
  r.per_class_ap50_95.assign(classes, 0.0);
  r.class_present.assign(classes, false);
  const auto thresholds = coco_iou_thresholds();
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    r.class_present[c] = !gts[c].empty();
    double acc = 0.0;
    for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
      const double ap = average_precision(dets[c], gts[c], thresholds[t]);
      acc += ap;
      if (t == 0) r.per_class_ap50[c] = ap;
      if (t == 5) r.per_class_ap75[c] = ap;
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

}  // namespace fdl
