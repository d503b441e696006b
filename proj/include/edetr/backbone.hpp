// 4-stage convolutional feature extractor and its multi-scale pyramid.
#pragma once

#include <array>

#include "edetr/params.hpp"
#include "edetr/tensor.hpp"

namespace edetr {

struct FeaturePyramid {
  std::vector<Tensor> levels;  // 4 maps [D, H_l, W_l]
  std::array<int, 4> strides = {8, 16, 32, 64};
  int d_model = 0;
};

/// Plain conv-norm-relu backbone. Stage outputs at strides 8/16/32 are
/// projected with 1x1 convs; the stride-64 level comes from a 3x3 stride-2
/// conv on the deepest stage.
class Backbone {
 public:
  Backbone(ParamStore& params, int d_model);

  /// image: [3,H,W], H,W >= 64; zero-padded up to a multiple of 64.
  FeaturePyramid forward(const Tensor& image) const;

 private:
  Tensor block(const Tensor& x, const std::string& name, int stride) const;
  ParamStore* params_;
  int d_;
};

}  // namespace edetr
