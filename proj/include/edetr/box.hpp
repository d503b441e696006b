// Normalized center-format boxes and plain (non-autodiff) box math.
#pragma once

#include <algorithm>
#include <cmath>

namespace edetr {

/// Box in normalized center format: all fields fractions of image size.
struct BoxCXCYWH {
  double cx = 0.5, cy = 0.5, w = 0.1, h = 0.1;
};

struct BoxXYXY {
  double x0, y0, x1, y1;
};

/// Corner form with corners clamped to [0,1] (the convention used for IoU).
inline BoxXYXY to_xyxy_clamped(const BoxCXCYWH& b) {
  auto cl = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {cl(b.cx - b.w / 2), cl(b.cy - b.h / 2), cl(b.cx + b.w / 2),
          cl(b.cy + b.h / 2)};
}

inline double box_area(const BoxXYXY& b) {
  return std::max(0.0, b.x1 - b.x0) * std::max(0.0, b.y1 - b.y0);
}

inline double iou_xyxy(const BoxXYXY& a, const BoxXYXY& b) {
  double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  double uni = box_area(a) + box_area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double iou_box(const BoxCXCYWH& a, const BoxCXCYWH& b) {
  return iou_xyxy(to_xyxy_clamped(a), to_xyxy_clamped(b));
}

/// GIoU = IoU - |C \ (A u B)| / |C|, C the smallest enclosing box. In [-1,1].
inline BoxXYXY to_xyxy(const BoxCXCYWH& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline double giou_xyxy(const BoxXYXY& a, const BoxXYXY& b) {
  double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  double uni = box_area(a) + box_area(b) - inter;
  double ex0 = std::min(a.x0, b.x0), ey0 = std::min(a.y0, b.y0);
  double ex1 = std::max(a.x1, b.x1), ey1 = std::max(a.y1, b.y1);
  double enc = (ex1 - ex0) * (ey1 - ey0);
  double iou = uni > 0 ? inter / uni : 0.0;
  return enc > 0 ? iou - (enc - uni) / enc : iou;
}

// Raw-definition GIoU (no corner clamping), matching the loss path.
inline double giou_box(const BoxCXCYWH& a, const BoxCXCYWH& b) {
  return giou_xyxy(to_xyxy(a), to_xyxy(b));
}

inline double inverse_sigmoid(double p, double eps = 1e-6) {
  p = std::clamp(p, eps, 1.0 - eps);
  return std::log(p / (1.0 - p));
}

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace edetr
