#pragma once

#include <functional>

#include "topowmamba/checkpoint.hpp"
#include "topowmamba/dataset.hpp"

namespace twm {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
  std::string optimizer = "adamw";  // "adamw" (decoupled) or "adam" (L2 into the gradient)
  double lr_min = 1e-6;
  std::int64_t epochs = 100;
  std::int64_t batch_size = 4;
  std::int64_t patience = 15;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json_string(int indent = -1) const;
  static TrainConfig from_json_string(const std::string& text);
};

// lr_min + (lr_max - lr_min) (1 + cos(pi step/total)) / 2
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t t = 0;

  static AdamState init(const ParamList<T>& params);
};

// One decoupled-weight-decay update over every parameter; reads gradients
// from the tensors' grad buffers (missing = zero). Non-finite gradients abort
// the step with the parameter named.
template <typename T>
void adamw_step(ParamList<T>& params, AdamState<T>& state, double lr_t, const TrainConfig& cfg);

struct EarlyStopping {
  std::int64_t patience;
  double best = -std::numeric_limits<double>::infinity();
  std::int64_t counter = 0;

  explicit EarlyStopping(std::int64_t patience_) : patience(patience_) {}
  // feeds one epoch's metric; true once `patience` non-improving epochs accrue
  bool update(double metric) {
    if (metric > best) {
      best = metric;
      counter = 0;
    } else {
      ++counter;
    }
    return counter >= patience;
  }
};

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_path;
  double best_val_dice = 0;
  std::int64_t epochs_run = 0;
};

TrainResult run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::string& data_dir,
                         const std::string& out_dir);

// Per-case metrics + aggregation over one split. The predictor maps a sample
// to its predicted mask; run_evaluation wires in a checkpointed model, tests
// can wire in anything (including the identity on ground truth).
MetricsReport evaluate_cases(const DatasetManifest& manifest, const std::string& split,
                             const std::function<LabelMask(const SampleRef&, const std::vector<float>&,
                                                           const LabelMask&)>& predictor,
                             const std::string& csv_path);

MetricsReport run_evaluation(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
                             const std::string& report_path, const std::string& csv_path);

void run_prediction(const std::string& ckpt_path, const std::vector<std::string>& inputs,
                    const std::string& out_dir, bool overlay);

// argmax over the class axis of [1,C,H,W] logits
LabelMask logits_to_mask(const Tensor<float>& logits, double sr, double sc);

}  // namespace twm
