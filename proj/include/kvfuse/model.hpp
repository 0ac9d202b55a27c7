#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kvfuse/tensor.hpp"

namespace kvfuse {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int head_dim = 32;
  int hidden_dim = 128;  // n_heads * head_dim
  int mlp_dim = 256;
  int vocab_size = 261;
  double rope_base = 10000.0;
  int max_position = 1024;
  float eps = 1e-5f;
  bool tie_embeddings = false;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Closed-form parameter count:
//   V*D + L*(2*D + 4*D*D + 3*D*F) + D + (tied ? 0 : D*V)
int64_t parameter_count(const ModelConfig& config);

struct LayerWeights {
  Tensor attention_norm;  // [D]
  Tensor wq, wk, wv, wo;  // [D, D], applied as x @ W
  Tensor ffn_norm;        // [D]
  Tensor w_gate, w_up;    // [D, F]
  Tensor w_down;          // [F, D]
};

// Llama-style decoder: RMSNorm pre-norm, rotary multi-head attention,
// SiLU-gated MLP, optional tied output head.
class Model {
 public:
  ModelConfig config;
  Tensor token_embedding;  // [V, D]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [D]
  Tensor lm_head;     // [D, V]; undefined when embeddings are tied

  // Stable ordering; this is also the checkpoint manifest order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;

  bool frozen() const { return frozen_; }
  // Clears requires_grad on every parameter (and drops any gradient).
  void freeze();
  void unfreeze();

  // Deep copy with fresh storage; frozen state is preserved.
  Model clone() const;

 private:
  bool frozen_ = false;
};

// Deterministic initialization. Every weight is N(0, 0.02^2) except the
// residual output projections (wo, w_down) which use 0.02 / sqrt(2 * L);
// norm gains start at 1. Tensors are filled in named_parameters() order
// from Rng(derive_seed(seed, "model.init")).
Model init_model(const ModelConfig& config, uint64_t seed);

// Key/value entries produced by one layer for T slots. Keys carry rotary
// encoding for `positions`. valid[t] == 0 marks left-padding slots.
struct LayerCache {
  Tensor k;  // [H, T, dh]
  Tensor v;  // [H, T, dh]
  std::vector<int32_t> positions;
  std::vector<uint8_t> valid;

  int64_t length() const { return static_cast<int64_t>(positions.size()); }
};

// Non-owning window onto K/V storage laid out [H, len, dh] with an arbitrary
// stride between heads.
struct KVView {
  const float* k = nullptr;
  const float* v = nullptr;
  int64_t length = 0;
  int64_t head_stride = 0;
  const uint8_t* valid = nullptr;  // null means every slot is valid
};

KVView make_view(const LayerCache& cache);

// Read-only cache segments attended to before a forward's own tokens. Each
// layer may have several segments (e.g. a fused passage block followed by
// already-decoded tokens); slot order is segment order.
struct PrefixCache {
  std::vector<std::vector<KVView>> layers;
  // Highest position index owned by the prefix; new tokens must lie above it.
  int32_t reserved_until = -1;

  int64_t slot_count() const;
  static PrefixCache from_caches(std::span<const LayerCache> caches);
};

struct ForwardOptions {
  // Per-token validity for the forward's own tokens; empty means all valid.
  std::span<const uint8_t> valid;
  bool capture_attention = false;
  bool compute_logits = true;
};

struct ForwardResult {
  Tensor logits;                    // [T, V] (undefined when not computed)
  std::vector<LayerCache> cache;    // this forward's own entries, one per layer
  std::vector<Tensor> attention;    // [H, T, prefix + T] per layer if captured
};

// Rotates (even, odd) coordinate pairs of x[H, T, dh] by
// position / rope_base^(2i / dh).
Tensor apply_rope(const Tensor& x, std::span<const int32_t> positions, double rope_base,
                  int max_position);

// Multi-head attention over prefix slots followed by causal self slots.
// Invalid slots receive a -1e30 score before the softmax. When `weights` is
// non-null it receives the attention probabilities [H, T, prefix + T].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const KVView> prefix, std::span<const uint8_t> self_valid,
                 Tensor* weights = nullptr);

ForwardResult decoder_forward(const Model& model, std::span<const int32_t> tokens,
                              std::span<const int32_t> positions,
                              const PrefixCache* prefix = nullptr,
                              const ForwardOptions& options = {});

// Growable per-layer K/V storage used for incremental decoding.
class KVBuffer {
 public:
  KVBuffer(const ModelConfig& config, int64_t capacity);

  void append(std::span<const LayerCache> entries);
  KVView view(int layer) const;
  int64_t length() const { return length_; }
  int32_t last_position() const { return last_position_; }

 private:
  int64_t heads_, head_dim_, capacity_, length_ = 0;
  int32_t last_position_ = -1;
  std::vector<std::vector<float>> k_, v_;
};

// --- checkpoints ---------------------------------------------------------------
//
// Layout: "KVFUSE01" | u64 little-endian header length | UTF-8 JSON header |
// raw little-endian float32 tensor data in manifest order.

struct Checkpoint {
  Model model;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> extra;
};

std::string save_checkpoint(const Model& model,
                            const nlohmann::json& meta = nlohmann::json::object(),
                            std::span<const std::pair<std::string, Tensor>> extra = {});
Checkpoint read_checkpoint(std::string_view bytes);
Model load_checkpoint(std::string_view bytes);

}  // namespace kvfuse
