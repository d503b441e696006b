// Adam optimizer, the epoch loop, metric logging, and NaN diagnostics.
#pragma once

#include <string>
#include <vector>

#include "edetr/evaluation.hpp"
#include "edetr/model.hpp"

namespace edetr {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled (applied outside the moments)
};

/// AdamW over every parameter of a ParamStore. Moment state is keyed by
/// registration order, so it survives only as long as the store layout.
class Adam {
 public:
  Adam(ParamStore& params, AdamConfig cfg);

  /// One update from the currently accumulated grads. lr overrides the
  /// configured rate when >= 0; grad_scale folds in batch averaging.
  void step(double lr = -1.0, double grad_scale = 1.0);

  int steps_taken() const { return t_; }

 private:
  ParamStore* params_;
  AdamConfig cfg_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  int epochs = 12;
  double lr = 1e-4;
  int lr_drop_epoch = 8;  // step schedule: drop once at 2/3 of the run
  double lr_drop_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int batch_size = 1;
  ModelConfig model;
  LossWeights loss;
  SetLossConfig set_loss;
  ProposalSchedule proposals;
};

struct EpochRecord {
  int epoch = 0;
  int k_proposals = 0;
  double loss_total = 0, loss_cls = 0, loss_l1 = 0, loss_giou = 0;
  double ap50_eval = 0;
  std::string to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> records;
  EvalSummary final_eval;
};

/// Throws if any tensor of the forward pass is non-finite, naming the
/// offending tensor and where it was found.
void check_finite(const ForwardResult& r, const std::string& where);

/// Loss of one image: Hungarian-matched decoder layers + the dense part,
/// plus a focal term on the auxiliary foreground head in agnostic mode.
LossBreakdown image_loss(const DetrModel& model, const ForwardResult& r,
                         const GroundTruth& truth, const LossWeights& weights,
                         const SetLossConfig& slcfg);

/// One optimizer update on a batch of images at proposal count k.
LossBreakdown train_step(DetrModel& model, Adam& opt,
                         const std::vector<const ImageSample*>& batch, int k,
                         const TrainConfig& cfg, double lr);

/// Runs the model over a dataset (no gradients) and scores it.
EvalSummary evaluate_model(const DetrModel& model,
                           const std::vector<ImageSample>& samples, int k);

/// Full training loop; appends one JSONL record per epoch to metrics_path
/// when non-empty. Evaluation uses the schedule's final proposal count.
TrainResult train(DetrModel& model, const std::vector<ImageSample>& train_set,
                  const std::vector<ImageSample>& eval_set,
                  const TrainConfig& cfg, const std::string& metrics_path = "");

}  // namespace edetr
