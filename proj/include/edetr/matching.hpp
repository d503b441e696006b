// Bipartite set matching and the composite detection loss.
#pragma once

#include <utility>
#include <vector>

#include "edetr/box.hpp"
#include "edetr/data.hpp"
#include "edetr/tensor.hpp"

namespace edetr {

struct LossWeights {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction, truth), ascending
  double total_cost = 0.0;
};

/// Set of N predictions as differentiable tensors.
/// logits: [N,C]; boxes: [N,4] normalized (cx,cy,w,h).
struct DetectionSet {
  Tensor logits;
  Tensor boxes;
  int count() const { return logits.defined() ? logits.dim(0) : 0; }
  BoxCXCYWH box_at(int i) const {
    return {boxes.data()[i * 4], boxes.data()[i * 4 + 1],
            boxes.data()[i * 4 + 2], boxes.data()[i * 4 + 3]};
  }
};

/// Minimum-cost injective assignment of min(N,G) pairs. Ties resolved toward
/// the lexicographically smallest pair list. Cost matrix is row-major N x G.
MatchResult hungarian(const std::vector<std::vector<double>>& cost);

/// Differentiable GIoU for paired rows of cxcywh boxes, on the raw
/// (unclamped) corner geometry. Returns [G].
Tensor giou_rows(const Tensor& pred, const Tensor& truth);

/// Scalar convenience form of the above.
Tensor giou(const Tensor& a, const Tensor& b);

/// Binary focal loss on a single logit.
Tensor focal_loss(const Tensor& logit, int target, double alpha, double gamma);

/// Focal loss over a full logit matrix against a {0,1} target mask,
/// summed over all entries and scaled by 1/normalizer.
Tensor focal_matrix(const Tensor& logits, const std::vector<double>& pos_mask,
                    double alpha, double gamma, double normalizer);

/// Matching cost matrix: per (prediction, truth) entry
/// lambda_cls * focal-cost + lambda_l1 * L1 + lambda_giou * (1 - GIoU).
std::vector<std::vector<double>> match_cost(const DetectionSet& pred,
                                            const GroundTruth& truth,
                                            const LossWeights& weights);

/// Dense-part 1-to-N assignment: for each truth the n highest-IoU predictions
/// become positives; a prediction claimed twice keeps its highest-IoU truth.
/// n == 1 is handled by the caller via hungarian matching.
std::vector<std::pair<int, int>> assign_1toN(
    const std::vector<std::vector<double>>& iou, int n);

struct LossBreakdown {
  Tensor total;
  double cls = 0.0, l1 = 0.0, giou = 0.0;  // lambda-weighted components
};

/// Loss of one detection set under a fixed assignment.
LossBreakdown loss_with_pairs(const DetectionSet& det, const GroundTruth& truth,
                              const std::vector<std::pair<int, int>>& pairs,
                              const LossWeights& weights);

struct SetLossConfig {
  int assign_n = 1;  // dense-part assignment; decoder layers always 1-to-1
};

/// Full training loss: Hungarian-matched loss per decoder layer plus the
/// dense part under its configured assignment.
LossBreakdown set_loss(const std::vector<DetectionSet>& decoder_outputs,
                       const DetectionSet& dense_output,
                       const GroundTruth& truth, const LossWeights& weights,
                       const SetLossConfig& config);

}  // namespace edetr
