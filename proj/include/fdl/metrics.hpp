#pragma once

#include "fdl/box.hpp"

#include <array>
#include <cstddef>
#include <vector>

namespace fdl {

struct Detection {
  std::size_t image = 0;
  int cls = 0;
  double score = 0.0;
  Box box;
};

struct GroundTruth {
  std::size_t image = 0;
  int cls = 0;
  Box box;
};

inline constexpr std::size_t kIouThresholdCount = 10;
// 0.50, 0.55, ..., 0.95
std::array<double, kIouThresholdCount> coco_iou_thresholds();

// Greedy score-descending suppression within each (image, class).
// Output is sorted by (image, class, score desc).
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

// All-point interpolated AP for one class at one IoU threshold. Detections
// are matched in descending score order (stable on input order) to the
// highest-IoU unmatched ground truth of the same image.
double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truths,
                         double iou_threshold);

struct EvalResult {
  std::vector<double> per_class_ap50;
  std::vector<double> per_class_ap75;
  std::vector<double> per_class_ap50_95;
  double mean_ap50 = 0.0;
  double mean_ap75 = 0.0;
  double mean_ap50_95 = 0.0;
  // Classes without any ground truth are excluded from the means.
  std::vector<bool> class_present;
};

EvalResult evaluate_detections(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truths,
                               std::size_t classes);

}  // namespace fdl
