#include "edetr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace edetr {

namespace {

// Jonker-Volgenant style shortest augmenting path on a square matrix.
// Returns row -> col assignment.
std::vector<int> solve_square(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

MatchResult hungarian(const std::vector<std::vector<double>>& cost) {
  int rows = static_cast<int>(cost.size());
  int cols = rows ? static_cast<int>(cost[0].size()) : 0;
  for (const auto& r : cost)
    for (double c : r)
      if (!std::isfinite(c))
        throw std::runtime_error("hungarian: non-finite cost entry");

  MatchResult res;
  if (rows == 0 || cols == 0) return res;

  int n = std::max(rows, cols);
  std::vector<std::vector<double>> sq(n, std::vector<double>(n, 0.0));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) sq[i][j] = cost[i][j];

  auto r2c = solve_square(sq);
  std::vector<int> pred_of_truth(cols, -1);
  for (int i = 0; i < rows; ++i)
    if (r2c[i] < cols) pred_of_truth[r2c[i]] = i;

  auto pairs_of = [&]() {
    std::vector<std::pair<int, int>> ps;
    for (int j = 0; j < cols; ++j)
      if (pred_of_truth[j] >= 0) ps.emplace_back(pred_of_truth[j], j);
    std::sort(ps.begin(), ps.end());
    return ps;
  };

  // Canonicalize exact ties toward the lexicographically smallest pair list.
  std::vector<char> matched(rows, 0);
  for (int j = 0; j < cols; ++j)
    if (pred_of_truth[j] >= 0) matched[pred_of_truth[j]] = 1;
  bool changed = true;
  while (changed) {
    changed = false;
    auto ps = pairs_of();
    for (auto& [i, j] : ps) {
      for (int i2 = 0; i2 < i; ++i2)
        if (!matched[i2] && cost[i2][j] == cost[i][j]) {
          matched[i] = 0;
          matched[i2] = 1;
          pred_of_truth[j] = i2;
          changed = true;
          break;
        }
      if (changed) break;
    }
    if (changed) continue;
    for (size_t a = 0; a < ps.size() && !changed; ++a)
      for (size_t b = a + 1; b < ps.size() && !changed; ++b) {
        auto [i1, j1] = ps[a];
        auto [i2, j2] = ps[b];
        if (j2 < j1 &&
            cost[i1][j2] + cost[i2][j1] == cost[i1][j1] + cost[i2][j2]) {
          pred_of_truth[j1] = i2;
          pred_of_truth[j2] = i1;
          changed = true;
        }
      }
  }

  res.pairs = pairs_of();
  for (auto& [i, j] : res.pairs) res.total_cost += cost[i][j];
  return res;
}

// ---------------------------------------------------------------------------
// differentiable losses

Tensor giou_rows(const Tensor& pred, const Tensor& truth) {
  int g = pred.dim(0);
  // cxcywh -> xyxy via a constant linear map
  static const std::vector<double> corner_map = {
      1, 0, 1, 0, 0, 1, 0, 1, -0.5, 0, 0.5, 0, 0, -0.5, 0, 0.5};
  Tensor cm = Tensor::from({4, 4}, corner_map);
  auto corners = [&](const Tensor& b) { return matmul(b, cm); };
  Tensor a = corners(pred), b = corners(truth);
  auto col = [&](const Tensor& t, int i) { return slice_cols(t, i, 1); };

  Tensor ix0 = maximum(col(a, 0), col(b, 0));
  Tensor iy0 = maximum(col(a, 1), col(b, 1));
  Tensor ix1 = minimum(col(a, 2), col(b, 2));
  Tensor iy1 = minimum(col(a, 3), col(b, 3));
  Tensor inter = mul(relu(sub(ix1, ix0)), relu(sub(iy1, iy0)));
  Tensor area_a = mul(relu(sub(col(a, 2), col(a, 0))),
                      relu(sub(col(a, 3), col(a, 1))));
  Tensor area_b = mul(relu(sub(col(b, 2), col(b, 0))),
                      relu(sub(col(b, 3), col(b, 1))));
  Tensor uni = sub(add(area_a, area_b), inter);
  Tensor iou = div(inter, add_scalar(uni, 1e-12));

  Tensor ex0 = minimum(col(a, 0), col(b, 0));
  Tensor ey0 = minimum(col(a, 1), col(b, 1));
  Tensor ex1 = maximum(col(a, 2), col(b, 2));
  Tensor ey1 = maximum(col(a, 3), col(b, 3));
  Tensor enc = mul(sub(ex1, ex0), sub(ey1, ey0));
  Tensor penalty = div(sub(enc, uni), add_scalar(enc, 1e-12));
  return reshape(sub(iou, penalty), {g});
}

Tensor giou(const Tensor& a, const Tensor& b) {
  return reshape(giou_rows(reshape(a, {1, 4}), reshape(b, {1, 4})), {1});
}

Tensor focal_loss(const Tensor& logit, int target, double alpha,
                  double gamma) {
  Tensor x = reshape(logit, {1});
  Tensor p = sigmoid(x);
  if (target == 1) {
    // -alpha * (1-p)^gamma * log(p)
    Tensor mod = pow_scalar(add_scalar(neg(p), 1.0), gamma);
    return mul_scalar(mul(mod, log_sigmoid(x)), -alpha);
  }
  // -(1-alpha) * p^gamma * log(1-p); log(1-p) = log_sigmoid(-x)
  Tensor mod = pow_scalar(p, gamma);
  return mul_scalar(mul(mod, log_sigmoid(neg(x))), -(1.0 - alpha));
}

Tensor focal_matrix(const Tensor& logits, const std::vector<double>& pos_mask,
                    double alpha, double gamma, double normalizer) {
  if (static_cast<int>(pos_mask.size()) != logits.numel())
    throw std::invalid_argument("focal_matrix: mask size mismatch");
  Tensor mask = Tensor::from(logits.shape(), pos_mask);
  Tensor inv_mask = add_scalar(neg(mask), 1.0);
  Tensor p = sigmoid(logits);
  Tensor pos = mul_scalar(
      mul(pow_scalar(add_scalar(neg(p), 1.0), gamma), log_sigmoid(logits)),
      -alpha);
  Tensor negt = mul_scalar(
      mul(pow_scalar(p, gamma), log_sigmoid(neg(logits))), -(1.0 - alpha));
  Tensor total = add(mul(mask, pos), mul(inv_mask, negt));
  return mul_scalar(sum(total), 1.0 / normalizer);
}

std::vector<std::vector<double>> match_cost(const DetectionSet& pred,
                                            const GroundTruth& truth,
                                            const LossWeights& wt) {
  int n = pred.count();
  int g = static_cast<int>(truth.boxes.size());
  int c = n ? pred.logits.dim(1) : 0;
  std::vector<std::vector<double>> cost(n, std::vector<double>(g, 0.0));
  for (int i = 0; i < n; ++i) {
    BoxCXCYWH bi = pred.box_at(i);
    for (int j = 0; j < g; ++j) {
      int cls = truth.labels[j];
      if (cls < 0 || cls >= c)
        throw std::invalid_argument("match_cost: label out of range");
      double x = pred.logits.data()[i * c + cls];
      double p = sigmoid_d(x);
      double logp = x >= 0 ? -std::log1p(std::exp(-x))
                           : x - std::log1p(std::exp(x));
      double log1mp = -x >= 0 ? -std::log1p(std::exp(x))
                              : -x - std::log1p(std::exp(-x));
      double pos = -wt.focal_alpha * std::pow(1 - p, wt.focal_gamma) * logp;
      double neg = -(1 - wt.focal_alpha) * std::pow(p, wt.focal_gamma) * log1mp;
      const BoxCXCYWH& bj = truth.boxes[j];
      double l1 = std::abs(bi.cx - bj.cx) + std::abs(bi.cy - bj.cy) +
                  std::abs(bi.w - bj.w) + std::abs(bi.h - bj.h);
      cost[i][j] = wt.lambda_cls * (pos - neg) + wt.lambda_l1 * l1 +
                   wt.lambda_giou * (1.0 - giou_box(bi, bj));
    }
  }
  return cost;
}

std::vector<std::pair<int, int>> assign_1toN(
    const std::vector<std::vector<double>>& iou, int n) {
  if (n < 1) throw std::invalid_argument("assign_1toN: n must be >= 1");
  int preds = static_cast<int>(iou.size());
  int truths = preds ? static_cast<int>(iou[0].size()) : 0;
  // best claim per prediction: (iou, truth); higher iou wins, ties -> lower
  // truth index
  std::vector<std::pair<double, int>> claim(preds, {-1.0, -1});
  for (int j = 0; j < truths; ++j) {
    std::vector<int> order(preds);
    for (int i = 0; i < preds; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return iou[a][j] > iou[b][j];
    });
    int take = std::min(n, preds);
    for (int r = 0; r < take; ++r) {
      int i = order[r];
      if (iou[i][j] > claim[i].first) claim[i] = {iou[i][j], j};
    }
  }
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < preds; ++i)
    if (claim[i].second >= 0) out.emplace_back(i, claim[i].second);
  return out;
}

LossBreakdown loss_with_pairs(const DetectionSet& det, const GroundTruth& truth,
                              const std::vector<std::pair<int, int>>& pairs,
                              const LossWeights& wt) {
  int n = det.count();
  int c = n ? det.logits.dim(1) : 0;
  double norm = std::max<size_t>(1, pairs.size());

  LossBreakdown out;
  std::vector<double> pos_mask(static_cast<size_t>(n) * c, 0.0);
  for (auto& [i, j] : pairs) pos_mask[i * c + truth.labels[j]] = 1.0;
  Tensor cls = mul_scalar(
      focal_matrix(det.logits, pos_mask, wt.focal_alpha, wt.focal_gamma, norm),
      wt.lambda_cls);
  out.cls = cls.value();
  out.total = cls;

  if (!pairs.empty()) {
    std::vector<int> pred_idx;
    std::vector<double> truth_rows;
    for (auto& [i, j] : pairs) {
      pred_idx.push_back(i);
      const auto& b = truth.boxes[j];
      truth_rows.insert(truth_rows.end(), {b.cx, b.cy, b.w, b.h});
    }
    Tensor pred_boxes = gather_rows(det.boxes, pred_idx);
    Tensor truth_boxes =
        Tensor::from({static_cast<int>(pairs.size()), 4}, truth_rows);
    Tensor l1 = mul_scalar(sum(abs(sub(pred_boxes, truth_boxes))),
                           wt.lambda_l1 / norm);
    Tensor giou_term = mul_scalar(
        sum(add_scalar(neg(giou_rows(pred_boxes, truth_boxes)), 1.0)),
        wt.lambda_giou / norm);
    out.l1 = l1.value();
    out.giou = giou_term.value();
    out.total = add(out.total, add(l1, giou_term));
  }
  return out;
}

namespace {

std::vector<std::pair<int, int>> one_to_one_pairs(const DetectionSet& det,
                                                  const GroundTruth& truth,
                                                  const LossWeights& wt) {
  if (truth.boxes.empty() || det.count() == 0) return {};
  return hungarian(match_cost(det, truth, wt)).pairs;
}

}  // namespace

LossBreakdown set_loss(const std::vector<DetectionSet>& decoder_outputs,
                       const DetectionSet& dense_output,
                       const GroundTruth& truth, const LossWeights& wt,
                       const SetLossConfig& config) {
  if (decoder_outputs.empty())
    throw std::invalid_argument("set_loss: need at least one decoder output");

  LossBreakdown acc;
  acc.total = Tensor::scalar(0.0);
  auto add_part = [&](const LossBreakdown& p) {
    acc.total = add(acc.total, p.total);
    acc.cls += p.cls;
    acc.l1 += p.l1;
    acc.giou += p.giou;
  };

  // matching recomputed independently per decoder layer
  for (const auto& det : decoder_outputs)
    add_part(loss_with_pairs(det, truth, one_to_one_pairs(det, truth, wt), wt));

  if (dense_output.count() > 0) {
    std::vector<std::pair<int, int>> pairs;
    if (config.assign_n <= 1 || truth.boxes.empty()) {
      pairs = one_to_one_pairs(dense_output, truth, wt);
    } else {
      int n = dense_output.count();
      int g = static_cast<int>(truth.boxes.size());
      std::vector<std::vector<double>> iou(n, std::vector<double>(g));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < g; ++j)
          iou[i][j] = iou_box(dense_output.box_at(i), truth.boxes[j]);
      pairs = assign_1toN(iou, config.assign_n);
    }
    add_part(loss_with_pairs(dense_output, truth, pairs, wt));
  }
  return acc;
}

}  // namespace edetr
