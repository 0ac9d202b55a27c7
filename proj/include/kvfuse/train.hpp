#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvfuse/data.hpp"
#include "kvfuse/fusion.hpp"
#include "kvfuse/model.hpp"

namespace kvfuse {

struct TrainConfig {
  double max_lr = 2e-3;
  double warmup_ratio = 0.05;
  int total_steps = 2000;
  int batch_size = 1;
  int grad_accum = 1;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int n = 64;              // passage slots
  int n_passages = 5;
  bool evidence_supervision = true;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup from 0 to max_lr over warmup_ratio * total_steps, then cosine
// decay to 0 at total_steps.
double lr_schedule(int64_t step, const TrainConfig& config);

// Language-model loss on the answer tokens y, with the fused cache and the
// query q as context. Positions predicting q tokens are masked out.
Tensor kv_fusion_loss(const Model& d_t, const FusedCache& fused, std::span<const int32_t> q,
                      std::span<const int32_t> y);

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  int64_t step = 0;

  static AdamState for_parameters(std::span<const Tensor> params);
};

// Decoupled weight decay Adam with bias correction. Reads gradients from the
// parameters; parameters without a gradient are treated as having zero grad.
void adamw_step(std::span<Tensor> params, AdamState& state, double lr, const TrainConfig& config);

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct TrainExample {
  std::string id;
  PassageBatch passages;
  std::vector<int32_t> q;
  std::vector<int32_t> y;
};

TrainExample make_train_example(const QAInstance& instance, const Tokenizer& tokenizer, int n,
                                bool evidence_supervision);

struct TrainState {
  int64_t step = 0;
  AdamState optimizer;
  double running_loss = 0.0;
};

// Adam moments as named tensors ("adam.m.<param>", "adam.v.<param>") for
// checkpoint storage, and the inverse.
std::vector<std::pair<std::string, Tensor>> optimizer_tensors(const Model& d_t,
                                                              const AdamState& state);
AdamState optimizer_from_tensors(const Model& d_t,
                                 std::span<const std::pair<std::string, Tensor>> extra,
                                 int64_t step);

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double elapsed_s = 0.0;
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_log;
  // Called after every `checkpoint_every` steps (0 disables).
  std::function<void(const Model& d_t, const TrainState& state)> on_checkpoint;
  int checkpoint_every = 0;
};

// Trains d_t on fused caches produced by the frozen d_p. Runs from
// state.step up to config.total_steps. Example selection and passage-order
// shuffling derive from (config.seed, global sample index), so a resumed run
// follows the same trajectory as an uninterrupted one.
void train(const Model& d_p, Model& d_t, std::span<const TrainExample> data,
           const TrainConfig& config, TrainState& state, const TrainHooks& hooks = {});

}  // namespace kvfuse
