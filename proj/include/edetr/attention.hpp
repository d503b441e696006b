// Multi-scale deformable attention and multi-head self-attention.
#pragma once

#include <string>
#include <vector>

#include "edetr/box.hpp"
#include "edetr/params.hpp"
#include "edetr/tensor.hpp"

namespace edetr {

struct AttentionConfig {
  int num_heads = 8;
  int points_per_level = 4;
  int num_levels = 4;
  int d_model = 32;
};

struct LevelShape {
  int h = 0, w = 0;
};

/// Linear projections of one deformable-attention module.
struct DeformAttnParams {
  Tensor w_offset, b_offset;  // D -> M*L*K*2
  Tensor w_weight, b_weight;  // D -> M*L*K
  Tensor w_value, b_value;    // D -> D
  Tensor w_out, b_out;        // D -> D

  /// Offset weights start at zero with a fixed radial bias pattern so the
  /// initial samples spread around the reference; sampling-weight logits
  /// start at zero (uniform).
  static DeformAttnParams create(ParamStore& params, const std::string& prefix,
                                 const AttentionConfig& cfg, bool refs_4d);
};

struct SelfAttnParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out;
  static SelfAttnParams create(ParamStore& params, const std::string& prefix,
                               int d_model);
};

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Deformable attention of N queries into the flattened multi-scale tokens.
/// tokens: [S,D] in level-major row order; shapes: per-level (h,w).
/// refs give the sampling anchors; in 4-d mode offsets are fractions of
/// (w/2, h/2) around the box center, in 2-d mode raw normalized deltas.
Tensor deform_attn(const Tensor& queries, const std::vector<BoxCXCYWH>& refs,
                   const Tensor& tokens, const std::vector<LevelShape>& shapes,
                   const DeformAttnParams& p, const AttentionConfig& cfg,
                   bool refs_4d);

/// Scaled dot-product multi-head attention; qk carries any positional
/// encoding, v is the raw stream the residual should come from.
Tensor self_attn(const Tensor& qk, const Tensor& v, const SelfAttnParams& p,
                 int num_heads);

/// Sinusoidal embedding of per-row coordinate tuples into D dims.
/// coords: [N, ncoord]; D must be divisible by 2*ncoord.
Tensor sinusoidal_embed(const std::vector<std::vector<double>>& coords, int d);

}  // namespace edetr
