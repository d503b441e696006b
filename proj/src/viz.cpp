#include "edetr/viz.hpp"

#include <cmath>
#include <sstream>

#include "edetr/matching.hpp"

namespace edetr {

std::string emit_reference_points(const ForwardResult& result, VizStage stage,
                                  const GroundTruth& truth, int viewport) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                  "#d62728", "#9467bd", "#8c564b"};
  const auto& stages = result.ref_stages;
  size_t first = 0, last = stages.empty() ? 0 : stages.size() - 1;
  if (stage == VizStage::kInit) last = first;
  if (stage == VizStage::kFinal) first = last;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << viewport
      << "\" height=\"" << viewport << "\" viewBox=\"0 0 " << viewport << " "
      << viewport << "\">\n"
      << "  <rect x=\"0\" y=\"0\" width=\"" << viewport << "\" height=\""
      << viewport << "\" fill=\"#ffffff\" stroke=\"#000000\"/>\n";

  auto px = [&](double v) { return v * viewport; };
  for (size_t g = 0; g < truth.boxes.size(); ++g) {
    const auto& b = truth.boxes[g];
    svg << "  <rect x=\"" << px(b.cx - b.w / 2) << "\" y=\""
        << px(b.cy - b.h / 2) << "\" width=\"" << px(b.w) << "\" height=\""
        << px(b.h)
        << "\" fill=\"none\" stroke=\"#444444\" stroke-dasharray=\"4 3\"/>\n";
  }

  for (size_t s = first; s <= last && s < stages.size(); ++s) {
    const char* color = palette[s % 6];
    svg << "  <g fill=\"" << color << "\" stroke=\"" << color << "\">\n";
    for (const auto& r : stages[s]) {
      if (r.w > 0.0 && r.h > 0.0)
        svg << "    <rect x=\"" << px(r.cx - r.w / 2) << "\" y=\""
            << px(r.cy - r.h / 2) << "\" width=\"" << px(r.w)
            << "\" height=\"" << px(r.h)
            << "\" fill=\"none\" stroke-opacity=\"0.35\"/>\n";
      svg << "    <circle cx=\"" << px(r.cx) << "\" cy=\"" << px(r.cy)
          << "\" r=\"3\"/>\n";
    }
    svg << "  </g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

double mean_matched_center_distance(const std::vector<BoxCXCYWH>& refs,
                                    const GroundTruth& truth) {
  if (refs.empty() || truth.boxes.empty()) return 0.0;
  std::vector<std::vector<double>> cost(refs.size(),
                                        std::vector<double>(truth.boxes.size()));
  for (size_t i = 0; i < refs.size(); ++i)
    for (size_t j = 0; j < truth.boxes.size(); ++j)
      cost[i][j] = std::hypot(refs[i].cx - truth.boxes[j].cx,
                              refs[i].cy - truth.boxes[j].cy);
  MatchResult m = hungarian(cost);
  double total = 0.0;
  for (const auto& [i, j] : m.pairs) total += cost[i][j];
  return total / static_cast<double>(m.pairs.size());
}

}  // namespace edetr
