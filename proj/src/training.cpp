#include "edetr/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace edetr {

Adam::Adam(ParamStore& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
  for (const auto& [name, t] : params.all()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr, double grad_scale) {
  if (lr < 0) lr = cfg_.lr;
  const auto& entries = params_->all();
  if (entries.size() != m_.size())
    throw std::invalid_argument("adam: parameter set changed under optimizer");
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  static const std::vector<double> kNoGrad;
  for (size_t p = 0; p < entries.size(); ++p) {
    Tensor t = entries[p].second;
    const auto& g = t.has_grad() ? t.grad() : kNoGrad;
    auto& data = t.mutable_data();
    if (!g.empty() && g.size() != data.size())
      throw std::invalid_argument("adam: grad shape mismatch for " +
                                  entries[p].first);
    for (size_t i = 0; i < data.size(); ++i) {
      double gi = g.empty() ? 0.0 : g[i] * grad_scale;
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1 - cfg_.beta1) * gi;
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1 - cfg_.beta2) * gi * gi;
      double mhat = m_[p][i] / bc1;
      double vhat = v_[p][i] / bc2;
      data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                       cfg_.weight_decay * data[i]);
    }
  }
}

std::string EpochRecord::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["k_proposals"] = k_proposals;
  j["loss_total"] = loss_total;
  j["loss_cls"] = loss_cls;
  j["loss_l1"] = loss_l1;
  j["loss_giou"] = loss_giou;
  j["ap50_eval"] = ap50_eval;
  return j.dump();
}

namespace {

bool all_finite(const Tensor& t) {
  if (!t.defined()) return true;
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

void check_finite(const ForwardResult& r, const std::string& where) {
  auto demand = [&](const Tensor& t, const std::string& name) {
    if (!all_finite(t))
      throw std::runtime_error("non-finite values in " + name + " (" + where +
                               ")");
  };
  demand(r.memory.features, "encoder memory features");
  demand(r.dense.logits, "dense logits");
  demand(r.dense.boxes, "dense boxes");
  demand(r.aux_objectness, "auxiliary objectness logits");
  for (size_t l = 0; l < r.decoder_outputs.size(); ++l) {
    demand(r.decoder_outputs[l].logits,
           "decoder layer " + std::to_string(l) + " logits");
    demand(r.decoder_outputs[l].boxes,
           "decoder layer " + std::to_string(l) + " boxes");
  }
}

LossBreakdown image_loss(const DetrModel& model, const ForwardResult& r,
                         const GroundTruth& truth, const LossWeights& weights,
                         const SetLossConfig& slcfg) {
  LossBreakdown lb =
      set_loss(r.decoder_outputs, r.dense, truth, weights, slcfg);

  if (model.config().class_agnostic && r.aux_objectness.defined()) {
    // supervise the foreground head with the dense-part assignment
    auto cost = match_cost(r.dense, truth, weights);
    std::vector<std::pair<int, int>> pairs;
    if (slcfg.assign_n <= 1) {
      pairs = hungarian(cost).pairs;
    } else {
      int n = r.dense.count(), g = static_cast<int>(truth.boxes.size());
      std::vector<std::vector<double>> iou(n, std::vector<double>(g));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < g; ++j)
          iou[i][j] = iou_box(r.dense.box_at(i), truth.boxes[j]);
      pairs = assign_1toN(iou, slcfg.assign_n);
    }
    std::vector<double> mask(r.dense.count(), 0.0);
    for (const auto& [p, t] : pairs) mask[p] = 1.0;
    double norm = std::max<size_t>(1, pairs.size());
    Tensor aux = focal_matrix(r.aux_objectness, mask, weights.focal_alpha,
                              weights.focal_gamma, norm);
    lb.total = add(lb.total, mul_scalar(aux, weights.lambda_cls));
    lb.cls += weights.lambda_cls * aux.value();
  }
  return lb;
}

LossBreakdown train_step(DetrModel& model, Adam& opt,
                         const std::vector<const ImageSample*>& batch, int k,
                         const TrainConfig& cfg, double lr) {
  model.params().zero_grads();
  LossBreakdown avg;
  double total = 0;
  for (const ImageSample* s : batch) {
    ForwardResult r = model.forward(s->pixels, k);
    check_finite(r, "forward pass on image " + s->id);
    LossBreakdown lb = image_loss(model, r, s->truth, cfg.loss, cfg.set_loss);
    if (!all_finite(lb.total))
      throw std::runtime_error("non-finite values in loss total (image " +
                               s->id + ")");
    lb.total.backward();
    total += lb.total.value();
    avg.cls += lb.cls;
    avg.l1 += lb.l1;
    avg.giou += lb.giou;
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  opt.step(lr, inv);
  avg.total = Tensor::scalar(total * inv);
  avg.cls *= inv;
  avg.l1 *= inv;
  avg.giou *= inv;
  return avg;
}

EvalSummary evaluate_model(const DetrModel& model,
                           const std::vector<ImageSample>& samples, int k) {
  NoGradGuard ng;
  std::vector<Detection> detections;
  std::vector<GroundTruth> truths;
  for (size_t i = 0; i < samples.size(); ++i) {
    ForwardResult r = model.forward(samples[i].pixels, k);
    const DetectionSet& det = r.decoder_outputs.back();
    int c = det.logits.dim(1);
    for (int q = 0; q < det.count(); ++q) {
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (det.logits.at({q, j}) > det.logits.at({q, best})) best = j;
      double score = sigmoid_d(det.logits.at({q, best}));
      if (model.config().class_agnostic && r.aux_objectness.defined() &&
          r.containers.source_index[q] >= 0)
        score *= sigmoid_d(
            r.aux_objectness.at({r.containers.source_index[q], 0}));
      detections.push_back(
          {static_cast<int>(i), best, score, det.box_at(q)});
    }
    truths.push_back(samples[i].truth);
  }
  return evaluate(detections, truths);
}

TrainResult train(DetrModel& model, const std::vector<ImageSample>& train_set,
                  const std::vector<ImageSample>& eval_set,
                  const TrainConfig& cfg, const std::string& metrics_path) {
  if (train_set.empty())
    throw std::invalid_argument("train: empty training set");
  if (cfg.lr_drop_epoch > cfg.epochs)
    throw std::invalid_argument("train: lr_drop_epoch exceeds epochs");

  Adam opt(model.params(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8,
                            cfg.weight_decay});
  std::ofstream log;
  if (!metrics_path.empty()) {
    log.open(metrics_path);
    if (!log)
      throw std::runtime_error("train: cannot open metrics log " +
                               metrics_path);
  }

  TrainResult result;
  int n = static_cast<int>(train_set.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    int k = proposals_at(cfg.proposals, epoch, cfg.epochs);
    double lr =
        cfg.lr * (epoch >= cfg.lr_drop_epoch ? cfg.lr_drop_factor : 1.0);
    std::vector<int> order = epoch_order(n, cfg.seed, epoch);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.k_proposals = k;
    int steps = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      std::vector<const ImageSample*> batch;
      for (int i = start; i < std::min(n, start + cfg.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      LossBreakdown lb = train_step(model, opt, batch, k, cfg, lr);
      rec.loss_total += lb.total.value();
      rec.loss_cls += lb.cls;
      rec.loss_l1 += lb.l1;
      rec.loss_giou += lb.giou;
      ++steps;
    }
    rec.loss_total /= steps;
    rec.loss_cls /= steps;
    rec.loss_l1 /= steps;
    rec.loss_giou /= steps;
    if (!eval_set.empty())
      rec.ap50_eval =
          evaluate_model(model, eval_set, cfg.proposals.n_end).ap50;
    result.records.push_back(rec);
    if (log.is_open()) log << rec.to_json() << "\n" << std::flush;
  }
  if (!eval_set.empty())
    result.final_eval = evaluate_model(model, eval_set, cfg.proposals.n_end);
  return result;
}

}  // namespace edetr
