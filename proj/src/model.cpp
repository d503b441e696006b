#include "edetr/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace edetr {

int proposals_at(const ProposalSchedule& schedule, int epoch,
                 int total_epochs) {
  if (epoch < 0 || epoch > total_epochs)
    throw std::invalid_argument("proposals_at: epoch out of range");
  if (schedule.n_start < schedule.n_end || schedule.n_end < 1)
    throw std::invalid_argument("proposals_at: need n_start >= n_end >= 1");
  if (schedule.decay_epochs <= 0) return schedule.n_end;
  double t = std::min(static_cast<double>(epoch) / schedule.decay_epochs, 1.0);
  return static_cast<int>(
      std::lround(schedule.n_start + (schedule.n_end - schedule.n_start) * t));
}

std::vector<double> objectness(const Tensor& logits, bool class_agnostic,
                               const Tensor& aux_logits) {
  int n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n);
  if (class_agnostic) {
    if (!aux_logits.defined() || aux_logits.dim(0) != n)
      throw std::invalid_argument(
          "objectness: class_agnostic mode requires auxiliary logits");
    for (int i = 0; i < n; ++i) out[i] = sigmoid_d(aux_logits.data()[i]);
  } else {
    for (int i = 0; i < n; ++i) {
      double best = -1e30;
      for (int j = 0; j < c; ++j)
        best = std::max(best, logits.data()[i * c + j]);
      out[i] = sigmoid_d(best);
    }
  }
  return out;
}

DetrModel::Head DetrModel::make_head(const std::string& prefix) {
  int d = cfg_.d_model, hid = cfg_.head_hidden, c = cfg_.num_classes;
  Head h;
  h.cls_w = params_.uniform(prefix + ".cls.w", {d, c}, d);
  h.cls_b = params_.zeros(prefix + ".cls.b", {c});
  h.r1_w = params_.uniform(prefix + ".reg1.w", {d, hid}, d);
  h.r1_b = params_.zeros(prefix + ".reg1.b", {hid});
  h.r2_w = params_.uniform(prefix + ".reg2.w", {hid, hid}, hid);
  h.r2_b = params_.zeros(prefix + ".reg2.b", {hid});
  h.r3_w = params_.zeros(prefix + ".reg3.w", {hid, 4});
  h.r3_b = params_.zeros(prefix + ".reg3.b", {4});
  return h;
}

DetrModel::DetrModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), params_(seed) {
  int d = cfg_.d_model;
  if (d % cfg_.heads != 0)
    throw std::invalid_argument("model: d_model must be divisible by heads");
  if (d % 8 != 0)
    throw std::invalid_argument("model: d_model must be divisible by 8");
  backbone_.emplace(params_, d);
  AttentionConfig acfg{cfg_.heads, cfg_.points, 4, d};

  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    std::string p = "enc" + std::to_string(i);
    EncLayer l;
    l.attn = DeformAttnParams::create(params_, p + ".attn", acfg, false);
    l.f1_w = params_.uniform(p + ".ffn1.w", {d, 4 * d}, d);
    l.f1_b = params_.zeros(p + ".ffn1.b", {4 * d});
    l.f2_w = params_.uniform(p + ".ffn2.w", {4 * d, d}, 4 * d);
    l.f2_b = params_.zeros(p + ".ffn2.b", {d});
    l.ln1_g = params_.constant(p + ".ln1.g", {d}, 1.0);
    l.ln1_b = params_.zeros(p + ".ln1.b", {d});
    l.ln2_g = params_.constant(p + ".ln2.g", {d}, 1.0);
    l.ln2_b = params_.zeros(p + ".ln2.b", {d});
    enc_.push_back(std::move(l));
  }
  for (int i = 0; i < cfg_.decoder_layers; ++i) {
    std::string p = "dec" + std::to_string(i);
    DecLayer l;
    l.self = SelfAttnParams::create(params_, p + ".self", d);
    l.cross = DeformAttnParams::create(params_, p + ".cross", acfg, cfg_.ref_4d);
    l.f1_w = params_.uniform(p + ".ffn1.w", {d, 4 * d}, d);
    l.f1_b = params_.zeros(p + ".ffn1.b", {4 * d});
    l.f2_w = params_.uniform(p + ".ffn2.w", {4 * d, d}, 4 * d);
    l.f2_b = params_.zeros(p + ".ffn2.b", {d});
    l.ln1_g = params_.constant(p + ".ln1.g", {d}, 1.0);
    l.ln1_b = params_.zeros(p + ".ln1.b", {d});
    l.ln2_g = params_.constant(p + ".ln2.g", {d}, 1.0);
    l.ln2_b = params_.zeros(p + ".ln2.b", {d});
    l.ln3_g = params_.constant(p + ".ln3.g", {d}, 1.0);
    l.ln3_b = params_.zeros(p + ".ln3.b", {d});
    dec_.push_back(std::move(l));
  }

  dense_head_ = make_head("dense_head");
  sparse_head_ = cfg_.share_head ? dense_head_ : make_head("sparse_head");

  level_embed_ = params_.uniform("level_embed", {4, d}, d);
  query_embed_ = params_.uniform("query_embed", {cfg_.max_queries, d}, d);
  ref_proj_w_ = params_.uniform("ref_proj.w", {d, 4}, d);
  ref_proj_b_ = params_.zeros("ref_proj.b", {4});
  aux_w_ = params_.uniform("aux_obj.w", {d, 1}, d);
  aux_b_ = params_.zeros("aux_obj.b", {1});
}

FeaturePyramid DetrModel::extract_pyramid(const Tensor& image) const {
  return backbone_->forward(image);
}

EncoderMemory DetrModel::encode(const FeaturePyramid& pyramid) const {
  if (pyramid.levels.size() != 4)
    throw std::invalid_argument("encode: expected 4 pyramid levels");
  int d = cfg_.d_model;

  EncoderMemory mem;
  std::vector<Tensor> token_parts;
  for (size_t l = 0; l < 4; ++l) {
    const Tensor& lv = pyramid.levels[l];
    int h = lv.dim(1), w = lv.dim(2);
    mem.shapes.push_back({h, w});
    token_parts.push_back(transpose(reshape(lv, {d, h * w})));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        mem.centers.emplace_back((x + 0.5) / w, (y + 0.5) / h);
        mem.level_of.push_back(static_cast<int>(l));
      }
  }
  Tensor x = concat_rows(token_parts);
  int s = x.dim(0);

  std::vector<std::vector<double>> cvec(s);
  std::vector<BoxCXCYWH> refs(s);
  for (int i = 0; i < s; ++i) {
    cvec[i] = {mem.centers[i].first, mem.centers[i].second};
    refs[i] = {mem.centers[i].first, mem.centers[i].second, 0.0, 0.0};
  }
  Tensor pos = sinusoidal_embed(cvec, d);
  Tensor lvl = gather_rows(level_embed_, mem.level_of);
  AttentionConfig acfg{cfg_.heads, cfg_.points, 4, d};

  for (const auto& layer : enc_) {
    Tensor q = add(add(x, pos), lvl);
    Tensor attn = deform_attn(q, refs, x, mem.shapes, layer.attn, acfg, false);
    x = layer_norm(add(x, attn), layer.ln1_g, layer.ln1_b);
    Tensor ffn = linear(relu(linear(x, layer.f1_w, layer.f1_b)), layer.f2_w,
                        layer.f2_b);
    x = layer_norm(add(x, ffn), layer.ln2_g, layer.ln2_b);
  }
  mem.features = x;
  return mem;
}

AnchorSet DetrModel::anchors(const EncoderMemory& memory) const {
  AnchorSet a;
  a.base_scale = cfg_.anchor_scale;
  for (size_t i = 0; i < memory.centers.size(); ++i) {
    double size = std::min(1.0, cfg_.anchor_scale * (1 << memory.level_of[i]));
    a.boxes.push_back(
        {memory.centers[i].first, memory.centers[i].second, size, size});
  }
  return a;
}

DetectionSet DetrModel::apply_head(const Head& head, const Tensor& features,
                                   const std::vector<BoxCXCYWH>& refs) const {
  int n = features.dim(0);
  Tensor logits = linear(features, head.cls_w, head.cls_b);
  Tensor h1 = relu(linear(features, head.r1_w, head.r1_b));
  Tensor h2 = relu(linear(h1, head.r2_w, head.r2_b));
  Tensor delta = linear(h2, head.r3_w, head.r3_b);
  std::vector<double> base(static_cast<size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    base[i * 4] = inverse_sigmoid(refs[i].cx);
    base[i * 4 + 1] = inverse_sigmoid(refs[i].cy);
    base[i * 4 + 2] = inverse_sigmoid(refs[i].w);
    base[i * 4 + 3] = inverse_sigmoid(refs[i].h);
  }
  Tensor boxes = sigmoid(add(delta, Tensor::from({n, 4}, std::move(base))));
  return {logits, boxes};
}

DetectionSet DetrModel::dense_predict(const EncoderMemory& memory) const {
  return apply_head(dense_head_, memory.features, anchors(memory).boxes);
}

Tensor DetrModel::aux_objectness(const EncoderMemory& memory) const {
  return linear(memory.features, aux_w_, aux_b_);
}

ContainerSet DetrModel::init_containers(const EncoderMemory& memory,
                                        const DetectionSet& dense,
                                        const std::vector<double>& scores,
                                        int k) const {
  ContainerSet out;
  double def = cfg_.anchor_scale;  // default box size at level 0
  if (cfg_.init == "dense") {
    int n = memory.count();
    if (k > n)
      throw std::invalid_argument("init_containers: k=" + std::to_string(k) +
                                  " exceeds token count " + std::to_string(n));
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
    idx.resize(k);
    out.queries = gather_rows(memory.features, idx);
    for (int i : idx) {
      BoxCXCYWH b = dense.box_at(i);
      if (!cfg_.ref_4d) b = {b.cx, b.cy, def, def};
      out.refs.push_back(b);
      out.source_index.push_back(i);
    }
    return out;
  }

  if (k > cfg_.max_queries)
    throw std::invalid_argument("init_containers: k exceeds max_queries");
  out.queries = slice_rows(query_embed_, 0, k);
  out.source_index.assign(k, -1);

  if (cfg_.init == "learnable") {
    Tensor boxes = sigmoid(linear(out.queries, ref_proj_w_, ref_proj_b_));
    for (int i = 0; i < k; ++i) {
      const double* b = boxes.data().data() + i * 4;
      if (cfg_.ref_4d)
        out.refs.push_back({b[0], b[1], b[2], b[3]});
      else
        out.refs.push_back({b[0], b[1], def, def});
    }
  } else if (cfg_.init == "grid") {
    int g = static_cast<int>(std::ceil(std::sqrt(double(k))));
    for (int i = 0; i < g && static_cast<int>(out.refs.size()) < k; ++i)
      for (int j = 0; j < g && static_cast<int>(out.refs.size()) < k; ++j)
        out.refs.push_back({(i + 0.5) / g, (j + 0.5) / g, def, def});
  } else if (cfg_.init == "center") {
    for (int i = 0; i < k; ++i) out.refs.push_back({0.5, 0.5, def, def});
  } else if (cfg_.init == "border") {
    for (int i = 0; i < k; ++i) {
      double t = 4.0 * i / k;
      double cx, cy;
      if (t < 1) {
        cx = t;
        cy = 0;
      } else if (t < 2) {
        cx = 1;
        cy = t - 1;
      } else if (t < 3) {
        cx = 3 - t;
        cy = 1;
      } else {
        cx = 0;
        cy = 4 - t;
      }
      out.refs.push_back({cx, cy, def, def});
    }
  } else {
    throw std::invalid_argument("init_containers: unknown strategy '" +
                                cfg_.init + "'");
  }
  return out;
}

std::vector<DetectionSet> DetrModel::decode(
    const ContainerSet& containers, const EncoderMemory& memory,
    int num_layers, std::vector<std::vector<BoxCXCYWH>>* ref_trace) const {
  if (containers.count() == 0)
    throw std::invalid_argument("decode: no containers");
  if (num_layers > static_cast<int>(dec_.size()))
    throw std::invalid_argument("decode: more layers requested than built");
  int d = cfg_.d_model;
  AttentionConfig acfg{cfg_.heads, cfg_.points, 4, d};

  Tensor x = containers.queries;
  std::vector<BoxCXCYWH> refs = containers.refs;
  std::vector<DetectionSet> outputs;
  for (int li = 0; li < num_layers; ++li) {
    const DecLayer& layer = dec_[li];
    std::vector<std::vector<double>> cvec;
    for (const auto& r : refs) cvec.push_back({r.cx, r.cy, r.w, r.h});
    Tensor qpos = sinusoidal_embed(cvec, d);

    Tensor sa = self_attn(add(x, qpos), x, layer.self, cfg_.heads);
    x = layer_norm(add(x, sa), layer.ln1_g, layer.ln1_b);
    Tensor ca = deform_attn(add(x, qpos), refs, memory.features, memory.shapes,
                            layer.cross, acfg, cfg_.ref_4d);
    x = layer_norm(add(x, ca), layer.ln2_g, layer.ln2_b);
    Tensor ffn = linear(relu(linear(x, layer.f1_w, layer.f1_b)), layer.f2_w,
                        layer.f2_b);
    x = layer_norm(add(x, ffn), layer.ln3_g, layer.ln3_b);

    DetectionSet det = apply_head(sparse_head_, x, refs);
    outputs.push_back(det);
    // iterative refinement: next layer's references are this layer's boxes
    refs.clear();
    for (int i = 0; i < det.count(); ++i) refs.push_back(det.box_at(i));
    if (ref_trace) ref_trace->push_back(refs);
  }
  return outputs;
}

ForwardResult DetrModel::forward(const Tensor& image, int k) const {
  ForwardResult r;
  r.memory = encode(extract_pyramid(image));
  r.dense = dense_predict(r.memory);
  if (cfg_.class_agnostic) r.aux_objectness = aux_objectness(r.memory);
  r.scores = objectness(r.dense.logits, cfg_.class_agnostic, r.aux_objectness);
  r.containers = init_containers(r.memory, r.dense, r.scores, k);
  r.ref_stages.push_back(r.containers.refs);
  r.decoder_outputs =
      decode(r.containers, r.memory, cfg_.decoder_layers, &r.ref_stages);
  return r;
}

void DetrModel::save_checkpoint(const std::string& path) const {
  nlohmann::json j;
  j["version"] = 1;
  auto& p = j["params"];
  for (const auto& [name, t] : params_.all()) {
    p[name] = {{"shape", t.shape()}, {"data", t.data()}};
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << j.dump();
}

void DetrModel::load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (!j.contains("params"))
    throw std::runtime_error("load_checkpoint: malformed checkpoint");
  for (const auto& [name, t] : params_.all()) {
    if (!j["params"].contains(name))
      throw std::runtime_error("load_checkpoint: missing parameter " + name);
    auto shape = j["params"][name]["shape"].get<Shape>();
    if (shape != t.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    auto data = j["params"][name]["data"].get<std::vector<double>>();
    params_.get(name).mutable_data() = std::move(data);
  }
}

}  // namespace edetr
