// Average-precision and recall metrics over detection outputs.
#pragma once

#include <string>
#include <vector>

#include "edetr/box.hpp"
#include "edetr/data.hpp"

namespace edetr {

/// One scored detection on one image, ready for the PR sweep.
struct Detection {
  int image_id = 0;
  int class_id = 0;
  double score = 0.0;
  BoxCXCYWH box;
};

struct ApResult {
  double ap = 0.0;
  double recall = 0.0;
};

struct EvalSummary {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;     // mean over IoU thresholds 0.50:0.05:0.95
  double recall = 0.0;  // at IoU 0.50
  std::string to_json() const;
};

/// All-points-interpolated AP with a global score-descending sweep; each
/// detection greedily matches the best still-unmatched same-class truth at
/// IoU >= threshold. truths[i] holds the ground truth of image_id == i.
ApResult average_precision(const std::vector<Detection>& detections,
                           const std::vector<GroundTruth>& truths,
                           double iou_threshold);

EvalSummary evaluate(const std::vector<Detection>& detections,
                     const std::vector<GroundTruth>& truths);

}  // namespace edetr
