#include "edetr/backbone.hpp"

#include <stdexcept>

namespace edetr {

Backbone::Backbone(ParamStore& params, int d_model)
    : params_(&params), d_(d_model) {
  auto conv = [&](const std::string& name, int cin, int cout, int k) {
    params.uniform("backbone." + name + ".w", {cout, cin, k, k},
                   cin * k * k);
    params.zeros("backbone." + name + ".b", {cout});
  };
  auto norm = [&](const std::string& name, int c) {
    params.constant("backbone." + name + ".gamma", {c}, 1.0);
    params.zeros("backbone." + name + ".beta", {c});
  };
  conv("stem", 3, d_, 3);
  norm("stem.norm", d_);
  for (const char* s : {"s2", "s3", "s4", "s5"}) {
    conv(s, d_, d_, 3);
    norm(std::string(s) + ".norm", d_);
  }
  for (const char* p : {"p3", "p4", "p5"}) conv(p, d_, d_, 1);
  conv("p6", d_, d_, 3);
}

Tensor Backbone::block(const Tensor& x, const std::string& name,
                       int stride) const {
  auto w = params_->get("backbone." + name + ".w");
  auto b = params_->get("backbone." + name + ".b");
  Tensor y = conv2d(x, w, b, stride, w.dim(2) / 2);
  y = channel_norm(y, params_->get("backbone." + name + ".norm.gamma"),
                   params_->get("backbone." + name + ".norm.beta"));
  return relu(y);
}

FeaturePyramid Backbone::forward(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("backbone: expected [3,H,W] image, got " +
                                shape_str(image.shape()));
  if (image.dim(1) < 64 || image.dim(2) < 64)
    throw std::invalid_argument(
        "backbone: image must be at least 64 px, got " +
        shape_str(image.shape()));
  int h = (image.dim(1) + 63) / 64 * 64;
  int w = (image.dim(2) + 63) / 64 * 64;
  Tensor x = pad_to(image, h, w);

  Tensor s1 = block(x, "stem", 2);   // stride 2
  Tensor s2 = block(s1, "s2", 2);    // stride 4
  Tensor c3 = block(s2, "s3", 2);    // stride 8
  Tensor c4 = block(c3, "s4", 2);    // stride 16
  Tensor c5 = block(c4, "s5", 2);    // stride 32

  auto proj = [&](const Tensor& c, const char* name) {
    return conv2d(c, params_->get(std::string("backbone.") + name + ".w"),
                  params_->get(std::string("backbone.") + name + ".b"), 1, 0);
  };
  FeaturePyramid pyr;
  pyr.d_model = d_;
  pyr.levels.push_back(proj(c3, "p3"));
  pyr.levels.push_back(proj(c4, "p4"));
  pyr.levels.push_back(proj(c5, "p5"));
  pyr.levels.push_back(conv2d(c5, params_->get("backbone.p6.w"),
                              params_->get("backbone.p6.b"), 2, 1));
  return pyr;
}

}  // namespace edetr
