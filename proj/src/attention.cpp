#include "edetr/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace edetr {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

DeformAttnParams DeformAttnParams::create(ParamStore& params,
                                          const std::string& prefix,
                                          const AttentionConfig& cfg,
                                          bool refs_4d) {
  int d = cfg.d_model;
  int mlk = cfg.num_heads * cfg.num_levels * cfg.points_per_level;
  DeformAttnParams p;
  p.w_offset = params.zeros(prefix + ".offset.w", {d, mlk * 2});

  // K points on a circle per head, radius growing with the point index;
  // per-level scaling only in 2-d mode where offsets are absolute.
  std::vector<double> bias(mlk * 2);
  for (int m = 0; m < cfg.num_heads; ++m)
    for (int l = 0; l < cfg.num_levels; ++l)
      for (int k = 0; k < cfg.points_per_level; ++k) {
        double angle = 2.0 * M_PI * m / cfg.num_heads;
        double radius = (k + 1.0) / cfg.points_per_level;
        double scale = refs_4d ? 0.5 : 0.05 * (1 << l);
        int s = (m * cfg.num_levels + l) * cfg.points_per_level + k;
        bias[2 * s] = std::cos(angle) * radius * scale;
        bias[2 * s + 1] = std::sin(angle) * radius * scale;
      }
  p.b_offset = params.explicit_init(prefix + ".offset.b", {mlk * 2}, bias);

  p.w_weight = params.zeros(prefix + ".weight.w", {d, mlk});
  p.b_weight = params.zeros(prefix + ".weight.b", {mlk});
  p.w_value = params.uniform(prefix + ".value.w", {d, d}, d);
  p.b_value = params.zeros(prefix + ".value.b", {d});
  p.w_out = params.uniform(prefix + ".out.w", {d, d}, d);
  p.b_out = params.zeros(prefix + ".out.b", {d});
  return p;
}

SelfAttnParams SelfAttnParams::create(ParamStore& params,
                                      const std::string& prefix, int d) {
  SelfAttnParams p;
  p.w_q = params.uniform(prefix + ".q.w", {d, d}, d);
  p.b_q = params.zeros(prefix + ".q.b", {d});
  p.w_k = params.uniform(prefix + ".k.w", {d, d}, d);
  p.b_k = params.zeros(prefix + ".k.b", {d});
  p.w_v = params.uniform(prefix + ".v.w", {d, d}, d);
  p.b_v = params.zeros(prefix + ".v.b", {d});
  p.w_out = params.uniform(prefix + ".out.w", {d, d}, d);
  p.b_out = params.zeros(prefix + ".out.b", {d});
  return p;
}

Tensor deform_attn(const Tensor& queries, const std::vector<BoxCXCYWH>& refs,
                   const Tensor& tokens, const std::vector<LevelShape>& shapes,
                   const DeformAttnParams& p, const AttentionConfig& cfg,
                   bool refs_4d) {
  int n = queries.dim(0);
  int d = cfg.d_model;
  int levels = static_cast<int>(shapes.size());
  if (levels != cfg.num_levels)
    throw std::invalid_argument("deform_attn: got " + std::to_string(levels) +
                                " levels, config expects " +
                                std::to_string(cfg.num_levels));
  if (static_cast<int>(refs.size()) != n)
    throw std::invalid_argument("deform_attn: refs/queries count mismatch");
  int mlk = cfg.num_heads * levels * cfg.points_per_level;

  // sampling locations: reference center plus query-dependent offsets
  Tensor offsets = linear(queries, p.w_offset, p.b_offset);  // [N, mlk*2]
  std::vector<double> center(static_cast<size_t>(n) * mlk * 2);
  std::vector<double> scale(static_cast<size_t>(n) * mlk * 2);
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < mlk; ++s) {
      center[(i * mlk + s) * 2] = refs[i].cx;
      center[(i * mlk + s) * 2 + 1] = refs[i].cy;
      scale[(i * mlk + s) * 2] = refs_4d ? refs[i].w / 2 : 1.0;
      scale[(i * mlk + s) * 2 + 1] = refs_4d ? refs[i].h / 2 : 1.0;
    }
  Tensor locs = add(mul(offsets, Tensor::from({n, mlk * 2}, scale)),
                    Tensor::from({n, mlk * 2}, center));
  locs = reshape(locs, {n, mlk, 2});

  // attention weights, softmaxed per head over levels x points
  Tensor logits = linear(queries, p.w_weight, p.b_weight);
  Tensor weights = reshape(
      softmax(reshape(logits, {n * cfg.num_heads,
                               levels * cfg.points_per_level}),
              1),
      {n, mlk});

  // per-level value maps from the projected token stream
  Tensor values = linear(tokens, p.w_value, p.b_value);
  std::vector<Tensor> maps;
  int row = 0;
  for (const auto& sh : shapes) {
    maps.push_back(rows_to_chw(slice_rows(values, row, sh.h * sh.w), sh.h, sh.w));
    row += sh.h * sh.w;
  }
  if (row != tokens.dim(0))
    throw std::invalid_argument("deform_attn: token count does not match shapes");

  Tensor sampled = ms_deform_sample(maps, locs, weights, cfg.num_heads,
                                    cfg.points_per_level);
  return linear(sampled, p.w_out, p.b_out);
}

Tensor self_attn(const Tensor& qk, const Tensor& v, const SelfAttnParams& p,
                 int num_heads) {
  int n = qk.dim(0), d = qk.dim(1);
  if (d % num_heads != 0)
    throw std::invalid_argument("self_attn: d_model not divisible by heads");
  int dh = d / num_heads;
  Tensor q = linear(qk, p.w_q, p.b_q);
  Tensor k = linear(qk, p.w_k, p.b_k);
  Tensor val = linear(v, p.w_v, p.b_v);
  std::vector<Tensor> heads;
  for (int m = 0; m < num_heads; ++m) {
    Tensor qh = slice_cols(q, m * dh, dh);
    Tensor kh = slice_cols(k, m * dh, dh);
    Tensor vh = slice_cols(val, m * dh, dh);
    Tensor scores =
        mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  return linear(concat_cols(heads), p.w_out, p.b_out);
  (void)n;
}

Tensor sinusoidal_embed(const std::vector<std::vector<double>>& coords, int d) {
  int n = static_cast<int>(coords.size());
  int nc = n ? static_cast<int>(coords[0].size()) : 1;
  if (d % (2 * nc) != 0)
    throw std::invalid_argument("sinusoidal_embed: d_model not divisible");
  int per = d / nc, pairs = per / 2;
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < nc; ++c)
      for (int f = 0; f < pairs; ++f) {
        double omega = M_PI * std::pow(2.0, f);
        out[i * d + c * per + 2 * f] = std::sin(coords[i][c] * omega);
        out[i * d + c * per + 2 * f + 1] = std::cos(coords[i][c] * omega);
      }
  return Tensor::from({n, d}, std::move(out));
}

}  // namespace edetr
