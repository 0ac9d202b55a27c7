#include "kvfuse/train.hpp"

#include <chrono>
#include <cmath>

#include "kvfuse/errors.hpp"
#include "kvfuse/rng.hpp"

namespace kvfuse {

void TrainConfig::validate() const {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid train config: ") + what);
  };
  check(max_lr >= 0.0, "max_lr must be non-negative");
  check(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "warmup_ratio must be in [0, 1)");
  check(total_steps >= 1, "total_steps must be >= 1");
  check(batch_size >= 1 && grad_accum >= 1, "batch_size and grad_accum must be >= 1");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  check(adam_eps > 0.0, "adam_eps must be positive");
  check(weight_decay >= 0.0, "weight_decay must be non-negative");
  check(n >= 2, "n must be >= 2");
  check(n_passages >= 1, "n_passages must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"max_lr", c.max_lr},
          {"warmup_ratio", c.warmup_ratio},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"grad_accum", c.grad_accum},
          {"seed", c.seed},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"n", c.n},
          {"n_passages", c.n_passages},
          {"evidence_supervision", c.evidence_supervision}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.n = j.value("n", c.n);
    c.n_passages = j.value("n_passages", c.n_passages);
    c.evidence_supervision = j.value("evidence_supervision", c.evidence_supervision);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double lr_schedule(int64_t step, const TrainConfig& config) {
  const double total = config.total_steps;
  const double warmup = config.warmup_ratio * total;
  const auto s = static_cast<double>(std::clamp<int64_t>(step, 0, config.total_steps));
  if (s < warmup) return config.max_lr * s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return config.max_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Tensor kv_fusion_loss(const Model& d_t, const FusedCache& fused, std::span<const int32_t> q,
                      std::span<const int32_t> y) {
  if (q.empty() || y.empty()) throw ContractError("kv_fusion_loss: q and y must be nonempty");
  std::vector<int32_t> tokens(q.begin(), q.end());
  tokens.insert(tokens.end(), y.begin(), y.end());
  const size_t m = tokens.size();
  ForwardResult r = fused_forward(d_t, fused, tokens);
  // Row t predicts token t+1; only rows whose next token belongs to y count.
  std::vector<int32_t> targets(m, 0);
  std::vector<uint8_t> mask(m, 0);
  for (size_t t = 0; t + 1 < m; ++t) {
    targets[t] = tokens[t + 1];
    mask[t] = (t + 1 >= q.size()) ? 1 : 0;
  }
  return cross_entropy(r.logits, targets, mask);
}

AdamState AdamState::for_parameters(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    s.v.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, AdamState& state, double lr, const TrainConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state does not match parameter list");
  }
  state.step += 1;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size() || v.size() != w.size()) {
      throw DimensionError("adamw_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    auto g = p.grad();
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      double wj = w[j];
      wj -= lr * config.weight_decay * wj;
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      wj -= lr * (mj / c1) / (std::sqrt(vj / c2) + config.adam_eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params)
    for (float g : p.grad()) ss += static_cast<double>(g) * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (auto& p : params)
      for (auto& g : p.mutable_grad()) g = static_cast<float>(g * f);
  }
  return norm;
}

std::vector<std::pair<std::string, Tensor>> optimizer_tensors(const Model& d_t,
                                                              const AdamState& state) {
  const auto named = d_t.named_parameters();
  if (state.m.size() != named.size()) {
    throw DimensionError("optimizer_tensors: state does not match the model");
  }
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < named.size(); ++i) {
    out.emplace_back("adam.m." + named[i].first, Tensor(named[i].second.shape(), state.m[i]));
  }
  for (size_t i = 0; i < named.size(); ++i) {
    out.emplace_back("adam.v." + named[i].first, Tensor(named[i].second.shape(), state.v[i]));
  }
  return out;
}

AdamState optimizer_from_tensors(const Model& d_t,
                                 std::span<const std::pair<std::string, Tensor>> extra,
                                 int64_t step) {
  const auto named = d_t.named_parameters();
  if (extra.size() != 2 * named.size()) {
    throw CheckpointError("optimizer state has " + std::to_string(extra.size()) +
                          " tensors, expected " + std::to_string(2 * named.size()));
  }
  AdamState s;
  s.step = step;
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& m = extra[i];
    const auto& v = extra[named.size() + i];
    if (m.first != "adam.m." + named[i].first || v.first != "adam.v." + named[i].first ||
        m.second.shape() != named[i].second.shape() || v.second.shape() != named[i].second.shape()) {
      throw CheckpointError("optimizer state does not match parameter " + named[i].first);
    }
    s.m.emplace_back(m.second.data().begin(), m.second.data().end());
    s.v.emplace_back(v.second.data().begin(), v.second.data().end());
  }
  return s;
}

TrainExample make_train_example(const QAInstance& instance, const Tokenizer& tokenizer, int n,
                                bool evidence_supervision) {
  TrainExample ex;
  ex.id = instance.id;
  ex.passages = PassageBatch::from_passages(instance.passages, tokenizer, n);
  auto target = format_target(instance.question, instance.answer, instance.evidence, tokenizer,
                              evidence_supervision);
  ex.q = std::move(target.q);
  ex.y = std::move(target.y);
  return ex;
}

void train(const Model& d_p, Model& d_t, std::span<const TrainExample> data,
           const TrainConfig& config, TrainState& state, const TrainHooks& hooks) {
  if (!d_p.frozen()) throw ContractError("train: the prefill decoder must be frozen");
  if (d_t.frozen()) throw ContractError("train: the trainable decoder is frozen");
  if (data.empty()) throw ContractError("train: empty dataset");
  config.validate();

  std::vector<Tensor> params = d_t.parameters();
  if (state.optimizer.m.empty()) state.optimizer = AdamState::for_parameters(params);

  const auto per_step = static_cast<int64_t>(config.batch_size) * config.grad_accum;
  const auto data_size = static_cast<int64_t>(data.size());
  const auto start = std::chrono::steady_clock::now();
  int64_t cached_epoch = -1;
  std::vector<int> epoch_order;

  for (; state.step < config.total_steps; ++state.step) {
    const double lr = lr_schedule(state.step, config);
    for (auto& p : params) p.zero_grad();
    double step_loss = 0.0;
    for (int64_t slot = 0; slot < per_step; ++slot) {
      const int64_t sample = state.step * per_step + slot;
      const int64_t epoch = sample / data_size;
      if (epoch != cached_epoch) {
        Rng epoch_rng(derive_seed(config.seed, "train.epoch." + std::to_string(epoch)));
        epoch_order = epoch_rng.permutation(static_cast<int>(data_size));
        cached_epoch = epoch;
      }
      const TrainExample& ex = data[static_cast<size_t>(epoch_order[sample % data_size])];
      Rng order_rng(derive_seed(config.seed, "train.order." + std::to_string(sample)));
      const auto order = order_rng.permutation(ex.passages.size());

      auto caches = prefill(d_p, ex.passages);
      FusedCache fused = res_fuse(caches, order);
      Graph graph;
      GraphScope scope(graph);
      Tensor loss = kv_fusion_loss(d_t, fused, ex.q, ex.y);
      step_loss += loss.item();
      graph.backward(scale(loss, 1.0f / static_cast<float>(per_step)));
    }
    clip_grad_norm(params, config.clip_norm);
    adamw_step(params, state.optimizer, lr, config);
    step_loss /= static_cast<double>(per_step);
    state.running_loss =
        state.step == 0 ? step_loss : 0.98 * state.running_loss + 0.02 * step_loss;

    if (hooks.on_log) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      hooks.on_log({state.step + 1, step_loss, lr, elapsed});
    }
    if (hooks.checkpoint_every > 0 && hooks.on_checkpoint &&
        (state.step + 1) % hooks.checkpoint_every == 0) {
      TrainState snapshot = state;
      snapshot.step += 1;
      hooks.on_checkpoint(d_t, snapshot);
    }
  }
  for (auto& p : params) p.zero_grad();
}

}  // namespace kvfuse
