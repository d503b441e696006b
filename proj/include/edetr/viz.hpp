// SVG emitter for container reference points across refinement stages.
#pragma once

#include <string>
#include <vector>

#include "edetr/data.hpp"
#include "edetr/model.hpp"

namespace edetr {

enum class VizStage { kInit, kAll, kFinal };

/// Renders the requested reference stages of a forward pass as SVG: one
/// circle per container reference center, color-coded by stage, plus the
/// ground-truth boxes; in 4-d mode each reference also draws its box
/// rectangle. viewport is the square pixel size of the output.
std::string emit_reference_points(const ForwardResult& result, VizStage stage,
                                  const GroundTruth& truth, int viewport = 512);

/// Mean euclidean distance between reference centers and the ground-truth
/// centers they match under a minimum-total-distance assignment.
double mean_matched_center_distance(const std::vector<BoxCXCYWH>& refs,
                                    const GroundTruth& truth);

}  // namespace edetr
