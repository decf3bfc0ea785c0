#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "zfcl/data.hpp"
#include "zfcl/task_bank.hpp"

namespace zfcl {

struct TrainConfig {
  double lr = 1e-2;
  int epochs = 10;
  double lr_decay_factor = 0.1;
  int lr_decay_epoch = 5;  // single decay event at this (0-based) epoch
  int batch_size = 32;
  uint64_t seed = 1;
  std::vector<double> lr_grid = {1e-1, 1e-2, 1e-3, 1e-4};

  float mask_tau = 0.0f;
  float mask_s0 = 0.01f;  // initial score, above tau so the initial mask is all-ones
  double lwf_lambda = 1.0;
  double lwf_temperature = 2.0;

  void validate() const;
  double lr_at_epoch(int epoch) const;
};

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step = 0;
  struct Slot {
    Tensor<float> m, v;
  };
  std::map<std::string, Slot> slots;
};

// Bias-corrected Adam over named tensors. The state keys are exactly the
// trainable set; a key mismatch is an error rather than a silent skip.
void adam_step(const std::map<std::string, Tensor<float>*>& params,
               const std::map<std::string, Tensor<float>>& grads, AdamState& state, double lr);

// Trains per-task parameters against a frozen base network and returns the
// finished record (grids frozen at 16-bit precision, BN snapshot captured
// after the final epoch). Supported methods: Zfcl, Mask, Readout.
TaskRecord train_task(const Network& base, const std::string& task_id, const ModulationSpec& spec,
                      const Dataset& train, const TrainConfig& cfg, Method method = Method::Zfcl);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

using LogitsFn = std::function<Tensor<float>(const Tensor<float>&)>;

EvalResult evaluate(const LogitsFn& logits, const Dataset& data, int batch_size = 64);
EvalResult evaluate(const ActiveModel& model, const Dataset& data, int batch_size = 64);

struct LrSearchResult {
  TrainConfig best_config;
  TaskRecord best_record;
  std::vector<std::pair<double, double>> tried;  // (lr, validation accuracy)
};

// One training run per grid point on a held-out split; argmax validation
// accuracy, ties broken toward the smaller learning rate.
LrSearchResult lr_search(const Network& base, const std::string& task_id,
                         const ModulationSpec& spec, const Dataset& train,
                         const TrainConfig& cfg, Method method = Method::Zfcl);

}  // namespace zfcl
