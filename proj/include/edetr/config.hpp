// INI-style run configuration with every default baked in.
#pragma once

#include <string>

#include "edetr/training.hpp"

namespace edetr {

/// Everything one run needs: model, optimizer, loss, schedule, and the
/// synthetic dataset it trains/evaluates on.
struct RunConfig {
  TrainConfig train;
  int train_images = 500;
  int eval_images = 100;
  int image_size = 128;
  int max_objects = 3;
  std::uint64_t data_seed = 1;
};

/// Defaults mirror the reference configuration at desk dimensions:
/// d_model 32, 3 encoder / 1 decoder layer, 8 heads, 4 points, dense init
/// with 4-d refs, proposals 300 -> 100, lambdas (2, 5, 2), Adam 1e-4.
RunConfig default_config();

/// Parses `key = value` lines; `[section]` headers and `#`/`;` comments are
/// ignored. Unknown keys are collected and reported in one error.
RunConfig parse_config_text(const std::string& text);

RunConfig load_config(const std::string& path);

}  // namespace edetr
