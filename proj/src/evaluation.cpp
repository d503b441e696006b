#include "edetr/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace edetr {

ApResult average_precision(const std::vector<Detection>& detections,
                           const std::vector<GroundTruth>& truths,
                           double iou_threshold) {
  if (iou_threshold <= 0.0 || iou_threshold >= 1.0)
    throw std::invalid_argument("average_precision: threshold must be in (0,1)");

  int total_truths = 0;
  for (const auto& t : truths) total_truths += static_cast<int>(t.boxes.size());
  if (total_truths == 0) return {0.0, 0.0};
  if (detections.empty()) return {0.0, 0.0};

  // global sweep in score-descending order; ties broken by insertion order
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<std::vector<bool>> used(truths.size());
  for (size_t i = 0; i < truths.size(); ++i)
    used[i].assign(truths[i].boxes.size(), false);

  std::vector<int> tp(order.size(), 0);
  for (size_t r = 0; r < order.size(); ++r) {
    const Detection& d = detections[order[r]];
    if (d.image_id < 0 || d.image_id >= static_cast<int>(truths.size()))
      throw std::out_of_range("average_precision: detection image_id " +
                              std::to_string(d.image_id) + " out of range");
    const GroundTruth& gt = truths[d.image_id];
    int best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gt.boxes.size(); ++g) {
      if (gt.labels[g] != d.class_id || used[d.image_id][g]) continue;
      double v = iou_box(d.box, gt.boxes[g]);
      if (v < iou_threshold) continue;
      if (best < 0 || v > best_iou) {  // IoU ties keep the first truth
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[d.image_id][best] = true;
      tp[r] = 1;
    }
  }

  // precision-recall points, then area under the all-points-interpolated
  // (monotone-envelope) curve
  std::vector<double> prec(order.size()), rec(order.size());
  int cum_tp = 0;
  for (size_t r = 0; r < order.size(); ++r) {
    cum_tp += tp[r];
    prec[r] = double(cum_tp) / double(r + 1);
    rec[r] = double(cum_tp) / double(total_truths);
  }
  for (int r = static_cast<int>(order.size()) - 2; r >= 0; --r)
    prec[r] = std::max(prec[r], prec[r + 1]);

  double ap = 0.0, prev_rec = 0.0;
  for (size_t r = 0; r < order.size(); ++r) {
    ap += (rec[r] - prev_rec) * prec[r];
    prev_rec = rec[r];
  }
  return {ap, rec.back()};
}

std::string EvalSummary::to_json() const {
  nlohmann::json j;
  j["ap50"] = ap50;
  j["ap75"] = ap75;
  j["map"] = map;
  j["recall"] = recall;
  return j.dump();
}

EvalSummary evaluate(const std::vector<Detection>& detections,
                     const std::vector<GroundTruth>& truths) {
  EvalSummary s;
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    double thr = 0.50 + 0.05 * i;
    ApResult r = average_precision(detections, truths, thr);
    sum += r.ap;
    if (i == 0) {
      s.ap50 = r.ap;
      s.recall = r.recall;
    }
    if (i == 5) s.ap75 = r.ap;
  }
  s.map = sum / 10.0;
  return s;
}

}  // namespace edetr
