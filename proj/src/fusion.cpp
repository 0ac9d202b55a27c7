#include "kvfuse/fusion.hpp"

#include <algorithm>
#include <numeric>

#include "kvfuse/errors.hpp"
#include "kvfuse/parallel.hpp"

namespace kvfuse {

void PassageBatch::validate() const {
  if (n < 1) throw ContractError("passage batch: n must be >= 1");
  if (tokens.empty()) throw ContractError("passage batch: no passages");
  if (valid.size() != tokens.size()) throw ContractError("passage batch: missing validity masks");
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (static_cast<int>(tokens[i].size()) != n || static_cast<int>(valid[i].size()) != n) {
      throw ContractError("passage batch: passage " + std::to_string(i) + " has " +
                          std::to_string(tokens[i].size()) + " slots, expected " +
                          std::to_string(n));
    }
    if (!valid[i].back()) throw ContractError("passage batch: passage has no valid token");
    for (int t = 1; t < n; ++t) {
      if (valid[i][t - 1] && !valid[i][t]) {
        throw ContractError("passage batch: padding must be on the left");
      }
    }
  }
}

PassageBatch PassageBatch::from_passages(std::span<const Passage> passages,
                                         const Tokenizer& tokenizer, int n) {
  PassageBatch batch;
  batch.n = n;
  for (const auto& p : passages) {
    auto f = format_passage(p, tokenizer, n);
    batch.tokens.push_back(std::move(f.tokens));
    batch.valid.push_back(std::move(f.valid));
    batch.ids.push_back(p.title);
  }
  return batch;
}

PassageCache prefill_passage(const Model& d_p, std::span<const int32_t> tokens,
                             std::span<const uint8_t> valid) {
  std::vector<int32_t> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  ForwardOptions opts;
  opts.valid = valid;
  opts.compute_logits = false;
  return decoder_forward(d_p, tokens, positions, nullptr, opts).cache;
}

std::vector<PassageCache> prefill(const Model& d_p, const PassageBatch& batch) {
  if (!d_p.frozen()) throw ContractError("prefill: the prefill decoder must be frozen");
  batch.validate();
  if (batch.n > d_p.config.max_position) {
    throw PositionError("prefill: n = " + std::to_string(batch.n) + " exceeds max_position");
  }
  std::vector<PassageCache> caches(static_cast<size_t>(batch.size()));
  parallel_for(batch.size(), [&](int64_t i) {
    caches[static_cast<size_t>(i)] =
        prefill_passage(d_p, batch.tokens[static_cast<size_t>(i)], batch.valid[static_cast<size_t>(i)]);
  });
  return caches;
}

FusedCache res_fuse(std::span<const PassageCache> caches, std::span<const int> order) {
  if (caches.empty()) throw ContractError("res_fuse: no caches");
  const auto count = static_cast<int>(caches.size());
  std::vector<int> ord(order.begin(), order.end());
  if (ord.empty()) {
    ord.resize(caches.size());
    std::iota(ord.begin(), ord.end(), 0);
  }
  {
    std::vector<int> sorted = ord;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> ident(caches.size());
    std::iota(ident.begin(), ident.end(), 0);
    if (sorted != ident) throw ContractError("res_fuse: order is not a permutation of 0..N-1");
  }
  const PassageCache& first = caches.front();
  const size_t layers = first.size();
  if (layers == 0) throw ContractError("res_fuse: cache without layers");
  const Shape block = first.front().k.shape();
  for (const auto& c : caches) {
    if (c.size() != layers) throw ContractError("res_fuse: caches disagree on layer count");
    for (const auto& lc : c) {
      if (lc.k.shape() != block || lc.v.shape() != block ||
          lc.length() != block[1] || static_cast<int64_t>(lc.valid.size()) != block[1]) {
        throw ContractError("res_fuse: heterogeneous cache shapes " + shape_str(lc.k.shape()) +
                            " vs " + shape_str(block));
      }
    }
  }
  const int64_t heads = block[0], n = block[1], dh = block[2];
  FusedCache fused;
  fused.n = static_cast<int>(n);
  fused.num_passages = count;
  for (size_t l = 0; l < layers; ++l) {
    std::vector<float> k(static_cast<size_t>(heads * count * n * dh));
    std::vector<float> v(k.size());
    LayerCache out;
    for (int64_t h = 0; h < heads; ++h) {
      for (int b = 0; b < count; ++b) {
        const LayerCache& src = caches[static_cast<size_t>(ord[b])][l];
        const size_t from = static_cast<size_t>(h * n * dh);
        const size_t to = static_cast<size_t>((h * count * n + b * n) * dh);
        std::copy_n(src.k.data().data() + from, n * dh, k.data() + to);
        std::copy_n(src.v.data().data() + from, n * dh, v.data() + to);
      }
    }
    for (int b = 0; b < count; ++b) {
      const LayerCache& src = caches[static_cast<size_t>(ord[b])][l];
      out.positions.insert(out.positions.end(), src.positions.begin(), src.positions.end());
      out.valid.insert(out.valid.end(), src.valid.begin(), src.valid.end());
    }
    out.k = Tensor({heads, count * n, dh}, std::move(k));
    out.v = Tensor({heads, count * n, dh}, std::move(v));
    fused.layers.push_back(std::move(out));
  }
  return fused;
}

std::vector<PassageCache> res_unfuse(const FusedCache& fused) {
  std::vector<PassageCache> out(static_cast<size_t>(fused.num_passages));
  for (const auto& layer : fused.layers) {
    const int64_t heads = layer.k.dim(0), dh = layer.k.dim(2), n = fused.n;
    const int64_t total = layer.k.dim(1);
    for (int b = 0; b < fused.num_passages; ++b) {
      std::vector<float> k(static_cast<size_t>(heads * n * dh)), v(k.size());
      for (int64_t h = 0; h < heads; ++h) {
        const size_t from = static_cast<size_t>((h * total + b * n) * dh);
        std::copy_n(layer.k.data().data() + from, n * dh, k.data() + h * n * dh);
        std::copy_n(layer.v.data().data() + from, n * dh, v.data() + h * n * dh);
      }
      LayerCache lc;
      lc.k = Tensor({heads, n, dh}, std::move(k));
      lc.v = Tensor({heads, n, dh}, std::move(v));
      lc.positions.assign(layer.positions.begin() + b * n, layer.positions.begin() + (b + 1) * n);
      lc.valid.assign(layer.valid.begin() + b * n, layer.valid.begin() + (b + 1) * n);
      out[static_cast<size_t>(b)].push_back(std::move(lc));
    }
  }
  return out;
}

ForwardResult fused_forward(const Model& d_t, const FusedCache& fused,
                            std::span<const int32_t> target_tokens,
                            const ForwardOptions& options) {
  const auto m = static_cast<int>(target_tokens.size());
  if (m < 1) throw ContractError("fused_forward: need at least one target token");
  if (fused.n + m > d_t.config.max_position) {
    throw PositionError("fused_forward: n + m = " + std::to_string(fused.n + m) +
                        " exceeds max_position " + std::to_string(d_t.config.max_position));
  }
  std::vector<int32_t> positions(static_cast<size_t>(m));
  std::iota(positions.begin(), positions.end(), fused.n);
  PrefixCache prefix = fused.prefix();
  prefix.reserved_until = fused.n - 1;
  return decoder_forward(d_t, target_tokens, positions, &prefix, options);
}

int32_t greedy_pick(std::span<const float> logits, double* gap) {
  int32_t best = 0;
  for (size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int32_t>(i);
  if (gap != nullptr) {
    double second = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < logits.size(); ++i)
      if (static_cast<int32_t>(i) != best) second = std::max(second, static_cast<double>(logits[i]));
    *gap = static_cast<double>(logits[static_cast<size_t>(best)]) - second;
  }
  return best;
}

namespace {

// Shared decoding loop. `segments_for` yields the fixed prefix views of a
// layer; decoded tokens are kept in a KVBuffer appended after them.
Generation decode(const Model& model, std::span<const int32_t> prompt, int32_t first_position,
                  const PrefixCache* fixed, const GenerateOptions& options) {
  const ModelConfig& cfg = model.config;
  const auto k = static_cast<int64_t>(prompt.size());
  if (k < 1) throw ContractError("generate: empty prompt");
  if (first_position + k + options.max_new > cfg.max_position + 1) {
    throw PositionError("generate: prompt and max_new exceed max_position");
  }
  Generation gen;
  KVBuffer buffer(cfg, k + options.max_new);

  std::vector<int32_t> positions(static_cast<size_t>(k));
  std::iota(positions.begin(), positions.end(), first_position);
  ForwardResult r = decoder_forward(model, prompt, positions, fixed, {});
  buffer.append(r.cache);
  const int64_t vocab = r.logits.dim(1);
  std::span<const float> last = r.logits.data().subspan(static_cast<size_t>((k - 1) * vocab));

  for (int step = 0;; ++step) {
    double gap = 0.0;
    const int32_t next = greedy_pick(last, &gap);
    gen.min_gap = std::min(gen.min_gap, gap);
    if (gap < options.tie_threshold) ++gen.near_ties;
    if (next == options.stop_token) {
      gen.stopped = true;
      break;
    }
    gen.tokens.push_back(next);
    if (static_cast<int>(gen.tokens.size()) >= options.max_new) {
      gen.hit_max_new = true;
      break;
    }
    PrefixCache prefix;
    prefix.reserved_until = buffer.last_position();
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::vector<KVView> segs;
      if (fixed != nullptr) segs = fixed->layers[static_cast<size_t>(l)];
      segs.push_back(buffer.view(l));
      prefix.layers.push_back(std::move(segs));
    }
    const int32_t pos = buffer.last_position() + 1;
    r = decoder_forward(model, std::span<const int32_t>(&gen.tokens.back(), 1),
                        std::span<const int32_t>(&pos, 1), &prefix, {});
    buffer.append(r.cache);
    last = r.logits.data();
  }
  return gen;
}

}  // namespace

Generation generate_from_fused(const Model& d_t, const FusedCache& fused,
                               std::span<const int32_t> query_tokens,
                               const GenerateOptions& options) {
  PrefixCache prefix = fused.prefix();
  prefix.reserved_until = fused.n - 1;
  return decode(d_t, query_tokens, fused.n, &prefix, options);
}

Generation generate_greedy(const Model& d_p, const Model& d_t, const PassageBatch& batch,
                           std::span<const int32_t> query_tokens,
                           const GenerateOptions& options, std::span<const int> order) {
  auto caches = prefill(d_p, batch);
  FusedCache fused = res_fuse(caches, order);
  return generate_from_fused(d_t, fused, query_tokens, options);
}

ForwardResult baseline_forward(const Model& model, std::span<const int32_t> prompt,
                               const ForwardOptions& options) {
  if (static_cast<int64_t>(prompt.size()) > model.config.max_position) {
    throw PositionError("baseline_forward: prompt of " + std::to_string(prompt.size()) +
                        " tokens exceeds max_position");
  }
  std::vector<int32_t> positions(prompt.size());
  std::iota(positions.begin(), positions.end(), 0);
  return decoder_forward(model, prompt, positions, nullptr, options);
}

Generation baseline_generate(const Model& model, std::span<const int32_t> prompt,
                             const GenerateOptions& options) {
  return decode(model, prompt, 0, nullptr, options);
}

}  // namespace kvfuse
