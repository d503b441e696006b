// The detector: encoder over the pyramid, dense head + top-K container
// initialization, and the refining decoder.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "edetr/attention.hpp"
#include "edetr/backbone.hpp"
#include "edetr/box.hpp"
#include "edetr/matching.hpp"
#include "edetr/params.hpp"

namespace edetr {

struct ModelConfig {
  int d_model = 32;
  int num_classes = 3;
  int heads = 8;
  int points = 4;
  int encoder_layers = 3;
  int decoder_layers = 1;
  double anchor_scale = 0.05;
  std::string init = "dense";  // dense | learnable | grid | center | border
  bool ref_4d = true;          // ref=4d vs ref=2d
  bool class_agnostic = false; // objectness=agnostic vs specific
  bool share_head = true;
  int head_hidden = 256;
  int max_queries = 300;       // learned-query table size for non-dense init
};

struct EncoderMemory {
  Tensor features;  // [S,D], level-major row order
  std::vector<int> level_of;
  std::vector<std::pair<double, double>> centers;  // cell centers in [0,1]^2
  std::vector<LevelShape> shapes;
  int count() const { return features.dim(0); }
};

struct AnchorSet {
  std::vector<BoxCXCYWH> boxes;
  double base_scale = 0.05;
};

struct ContainerSet {
  Tensor queries;  // [k,D]
  std::vector<BoxCXCYWH> refs;
  std::vector<int> source_index;  // encoder token index, -1 if none
  int count() const { return static_cast<int>(refs.size()); }
};

struct ProposalSchedule {
  int n_start = 300;
  int n_end = 100;
  int decay_epochs = 1;
};

/// Linear proposal-count decay; evaluation always uses n_end.
int proposals_at(const ProposalSchedule& schedule, int epoch, int total_epochs);

/// Objectness per prediction: class-specific takes max sigmoid class score,
/// class-agnostic reads the auxiliary foreground logit column.
std::vector<double> objectness(const Tensor& logits, bool class_agnostic,
                               const Tensor& aux_logits);

struct ForwardResult {
  EncoderMemory memory;
  DetectionSet dense;
  Tensor aux_objectness;  // [S,1] foreground logits (agnostic mode only)
  std::vector<double> scores;
  ContainerSet containers;
  std::vector<DetectionSet> decoder_outputs;
  // reference stages: [0] = init, then one per decoder layer
  std::vector<std::vector<BoxCXCYWH>> ref_stages;
};

class DetrModel {
 public:
  DetrModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }

  FeaturePyramid extract_pyramid(const Tensor& image) const;
  EncoderMemory encode(const FeaturePyramid& pyramid) const;
  AnchorSet anchors(const EncoderMemory& memory) const;
  DetectionSet dense_predict(const EncoderMemory& memory) const;
  Tensor aux_objectness(const EncoderMemory& memory) const;
  ContainerSet init_containers(const EncoderMemory& memory,
                               const DetectionSet& dense,
                               const std::vector<double>& scores, int k) const;
  std::vector<DetectionSet> decode(
      const ContainerSet& containers, const EncoderMemory& memory,
      int num_layers,
      std::vector<std::vector<BoxCXCYWH>>* ref_trace = nullptr) const;

  ForwardResult forward(const Tensor& image, int k) const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  struct Head {
    Tensor cls_w, cls_b;
    Tensor r1_w, r1_b, r2_w, r2_b, r3_w, r3_b;
  };
  Head make_head(const std::string& prefix);
  DetectionSet apply_head(const Head& head, const Tensor& features,
                          const std::vector<BoxCXCYWH>& refs) const;

  struct EncLayer {
    DeformAttnParams attn;
    Tensor f1_w, f1_b, f2_w, f2_b;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  };
  struct DecLayer {
    SelfAttnParams self;
    DeformAttnParams cross;
    Tensor f1_w, f1_b, f2_w, f2_b;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  };

  ModelConfig cfg_;
  ParamStore params_;
  std::optional<Backbone> backbone_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Head dense_head_, sparse_head_;
  Tensor level_embed_, query_embed_, ref_proj_w_, ref_proj_b_, aux_w_, aux_b_;
};

}  // namespace edetr
