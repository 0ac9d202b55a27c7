#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kvfuse/data.hpp"
#include "kvfuse/model.hpp"

namespace kvfuse {

// N passages, each exactly n slots after left padding.
struct PassageBatch {
  int n = 0;
  std::vector<std::vector<int32_t>> tokens;
  std::vector<std::vector<uint8_t>> valid;
  std::vector<std::string> ids;

  int size() const { return static_cast<int>(tokens.size()); }
  // Throws ContractError unless every passage has exactly n slots, padding is
  // only on the left, and at least one slot is valid.
  void validate() const;

  static PassageBatch from_passages(std::span<const Passage> passages,
                                    const Tokenizer& tokenizer, int n);
};

// One passage's cache: a LayerCache of shape [H, n, d_h] per layer.
using PassageCache = std::vector<LayerCache>;

// Encodes one passage with local positions 0..n-1 and no other context.
PassageCache prefill_passage(const Model& d_p, std::span<const int32_t> tokens,
                             std::span<const uint8_t> valid);

// Encodes every passage of the batch independently (optionally in parallel).
// Requires a frozen prefill model.
std::vector<PassageCache> prefill(const Model& d_p, const PassageBatch& batch);

// Per-layer K^l, V^l of shape [H, N*n, d_h]. Block b occupies slots
// b*n .. b*n+n-1 and carries local positions 0..n-1.
struct FusedCache {
  std::vector<LayerCache> layers;
  int n = 0;
  int num_passages = 0;

  std::span<const uint8_t> valid() const { return layers.front().valid; }
  PrefixCache prefix() const { return PrefixCache::from_caches(layers); }
};

// Concatenates per-passage caches along the token axis in the given order
// (identity when `order` is empty). Pure data movement.
FusedCache res_fuse(std::span<const PassageCache> caches, std::span<const int> order = {});

// Splits a fused cache back into its blocks, in fused order.
std::vector<PassageCache> res_unfuse(const FusedCache& fused);

// Runs the trainable decoder over target tokens at positions n..n+m-1,
// attending to every valid fused slot plus its own causal prefix.
ForwardResult fused_forward(const Model& d_t, const FusedCache& fused,
                            std::span<const int32_t> target_tokens,
                            const ForwardOptions& options = {});

struct GenerateOptions {
  int max_new = 48;
  int32_t stop_token = Tokenizer::kEos;
  // Steps whose top-1 / top-2 logit gap falls below this are counted as near-ties.
  double tie_threshold = 1e-6;
};

struct Generation {
  std::vector<int32_t> tokens;  // excludes the stop token
  bool stopped = false;
  bool hit_max_new = false;
  int near_ties = 0;
  double min_gap = std::numeric_limits<double>::infinity();
};

// Greedy argmax with the lowest token id winning exact ties.
int32_t greedy_pick(std::span<const float> logits, double* gap = nullptr);

Generation generate_from_fused(const Model& d_t, const FusedCache& fused,
                               std::span<const int32_t> query_tokens,
                               const GenerateOptions& options = {});

// prefill -> res_fuse(order) -> greedy decoding after the query.
Generation generate_greedy(const Model& d_p, const Model& d_t, const PassageBatch& batch,
                           std::span<const int32_t> query_tokens,
                           const GenerateOptions& options = {}, std::span<const int> order = {});

// Conventional causal LM over a concatenated prompt with global positions.
ForwardResult baseline_forward(const Model& model, std::span<const int32_t> prompt,
                               const ForwardOptions& options = {});
Generation baseline_generate(const Model& model, std::span<const int32_t> prompt,
                             const GenerateOptions& options = {});

}  // namespace kvfuse
