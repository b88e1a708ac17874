#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moemui/model.hpp"
#include "moemui/tasks.hpp"

namespace moemui {

struct TrainConfig {
  double learning_rate = 0.1;
  int steps = 1000;
  int batch_size = 16;
  double aux_alpha = 0.01;  // load-balancing coefficient
  int checkpoint_every = 100;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // empty: keep checkpoints in memory only

  void validate() const;
};

struct LossBreakdown {
  double loss = 0.0;     // cross_entropy + alpha * aux
  double cross_entropy = 0.0;
  double aux = 0.0;      // load-balance term, averaged over layers (unscaled)
};

struct LossAndGrads {
  LossBreakdown value;
  ModelParams grads;  // same shapes as the model
};

/// Mean target-token cross-entropy plus alpha * aux, where per layer
/// aux = n_routed * sum_i f_i * P_i, f_i = share of top-k assignments routed to
/// expert i (sums to 1) and P_i = mean full-softmax router probability.
/// Gradients flow through the selected gate weights only (straight-through
/// top-k); f_i is treated as a constant.
LossAndGrads loss_and_grads(const ModelParams& params, std::span<const Example> batch, double aux_alpha);

/// Loss only; skips the backward pass.
LossBreakdown evaluate_loss(const ModelParams& params, std::span<const Example> batch, double aux_alpha);

/// Exact-match accuracy of greedy decoding (max_len = target length) against targets.
double accuracy(const ModelParams& params, std::span<const Example> dataset, const MaskSpec& mask = {});

/// params -= learning_rate * grads
void sgd_step(ModelParams& params, const ModelParams& grads, double learning_rate);

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double aux_loss = 0.0;
  double eval_acc = 0.0;
};

struct Snapshot {
  int step = 0;
  ModelParams params;
  std::filesystem::path file;  // empty when out_dir is empty
};

struct TrainResult {
  std::vector<Snapshot> checkpoints;  // step 0, every checkpoint_every steps, and the final step
  std::vector<TrainLogEntry> log;     // one entry per checkpoint
  bool diverged = false;
  std::string message;                // divergence description, if any
};

/// SGD over `dataset`. Batches are drawn by reshuffling each epoch with
/// config.seed. On a non-finite loss, training stops and every checkpoint
/// written so far is kept.
TrainResult train(ModelParams params, std::span<const Example> dataset, const TrainConfig& config);

std::string checkpoint_filename(int step);

/// One JSON object per line: {"step","loss","aux_loss","eval_acc"}.
std::string format_train_log(std::span<const TrainLogEntry> log);

}  // namespace moemui
