#include "kvfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kvfuse/errors.hpp"
#include "kvfuse/rng.hpp"

namespace kvfuse {

namespace {

constexpr double kMaskedScore = -1e30;
constexpr double kInitStd = 0.02;

void check_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid model config: " + what);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  std::vector<float> data(n);
  for (auto& x : data) x = static_cast<float>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(data));
}

Tensor ones(int64_t n) { return Tensor({n}, std::vector<float>(static_cast<size_t>(n), 1.0f)); }

}  // namespace

// --- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  check_config(n_layers >= 1, "n_layers must be >= 1");
  check_config(n_heads >= 1, "n_heads must be >= 1");
  check_config(head_dim >= 2 && head_dim % 2 == 0, "head_dim must be even and >= 2");
  check_config(hidden_dim == n_heads * head_dim, "hidden_dim must equal n_heads * head_dim");
  check_config(mlp_dim >= 1, "mlp_dim must be >= 1");
  check_config(vocab_size >= 260, "vocab_size must be >= 260");
  check_config(rope_base > 0.0, "rope_base must be positive");
  check_config(max_position >= 1, "max_position must be >= 1");
  check_config(eps >= 0.0f, "eps must be non-negative");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},     {"hidden_dim", c.hidden_dim},
          {"mlp_dim", c.mlp_dim},       {"vocab_size", c.vocab_size},
          {"rope_base", c.rope_base},   {"max_position", c.max_position},
          {"eps", c.eps},               {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.hidden_dim = j.value("hidden_dim", c.n_heads * c.head_dim);
    c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.max_position = j.value("max_position", c.max_position);
    c.eps = j.value("eps", c.eps);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

int64_t parameter_count(const ModelConfig& c) {
  const int64_t d = c.hidden_dim, f = c.mlp_dim, v = c.vocab_size, l = c.n_layers;
  return v * d + l * (2 * d + 4 * d * d + 3 * d * f) + d + (c.tie_embeddings ? 0 : d * v);
}

// --- Model --------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embeddings", token_embedding);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const auto& w = layers[i];
    out.emplace_back(p + "attention_norm", w.attention_norm);
    out.emplace_back(p + "wq", w.wq);
    out.emplace_back(p + "wk", w.wk);
    out.emplace_back(p + "wv", w.wv);
    out.emplace_back(p + "wo", w.wo);
    out.emplace_back(p + "ffn_norm", w.ffn_norm);
    out.emplace_back(p + "w_gate", w.w_gate);
    out.emplace_back(p + "w_up", w.w_up);
    out.emplace_back(p + "w_down", w.w_down);
  }
  out.emplace_back("norm", final_norm);
  if (lm_head.defined()) out.emplace_back("output", lm_head);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Model::freeze() {
  for (auto& t : parameters()) {
    Tensor h = t;
    h.set_requires_grad(false);
    h.zero_grad();
  }
  frozen_ = true;
}

void Model::unfreeze() {
  for (auto& t : parameters()) {
    Tensor h = t;
    h.set_requires_grad(true);
  }
  frozen_ = false;
}

Model Model::clone() const {
  Model m;
  m.config = config;
  auto copy = [this](const Tensor& t) {
    if (!t.defined()) return Tensor();
    Tensor c = t.clone();
    c.set_requires_grad(!frozen_);
    return c;
  };
  m.token_embedding = copy(token_embedding);
  for (const auto& w : layers) {
    m.layers.push_back({copy(w.attention_norm), copy(w.wq), copy(w.wk), copy(w.wv), copy(w.wo),
                        copy(w.ffn_norm), copy(w.w_gate), copy(w.w_up), copy(w.w_down)});
  }
  m.final_norm = copy(final_norm);
  m.lm_head = copy(lm_head);
  m.frozen_ = frozen_;
  return m;
}

Model init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "model.init"));
  const int64_t d = config.hidden_dim, f = config.mlp_dim, v = config.vocab_size;
  const double residual_std = kInitStd / std::sqrt(2.0 * config.n_layers);
  Model m;
  m.config = config;
  m.token_embedding = normal_tensor({v, d}, kInitStd, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attention_norm = ones(d);
    w.wq = normal_tensor({d, d}, kInitStd, rng);
    w.wk = normal_tensor({d, d}, kInitStd, rng);
    w.wv = normal_tensor({d, d}, kInitStd, rng);
    w.wo = normal_tensor({d, d}, residual_std, rng);
    w.ffn_norm = ones(d);
    w.w_gate = normal_tensor({d, f}, kInitStd, rng);
    w.w_up = normal_tensor({d, f}, kInitStd, rng);
    w.w_down = normal_tensor({f, d}, residual_std, rng);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = ones(d);
  if (!config.tie_embeddings) m.lm_head = normal_tensor({d, v}, kInitStd, rng);
  m.unfreeze();
  return m;
}

// --- caches -------------------------------------------------------------------

KVView make_view(const LayerCache& cache) {
  KVView view;
  view.k = cache.k.data().data();
  view.v = cache.v.data().data();
  view.length = cache.length();
  view.head_stride = cache.length() * cache.k.dim(2);
  view.valid = cache.valid.empty() ? nullptr : cache.valid.data();
  return view;
}

int64_t PrefixCache::slot_count() const {
  if (layers.empty()) return 0;
  int64_t n = 0;
  for (const auto& seg : layers.front()) n += seg.length;
  return n;
}

PrefixCache PrefixCache::from_caches(std::span<const LayerCache> caches) {
  PrefixCache p;
  for (const auto& c : caches) {
    p.layers.push_back({make_view(c)});
    for (int32_t pos : c.positions) p.reserved_until = std::max(p.reserved_until, pos);
  }
  return p;
}

KVBuffer::KVBuffer(const ModelConfig& config, int64_t capacity)
    : heads_(config.n_heads),
      head_dim_(config.head_dim),
      capacity_(capacity),
      k_(static_cast<size_t>(config.n_layers)),
      v_(static_cast<size_t>(config.n_layers)) {
  for (size_t l = 0; l < k_.size(); ++l) {
    k_[l].assign(static_cast<size_t>(heads_ * capacity_ * head_dim_), 0.0f);
    v_[l].assign(static_cast<size_t>(heads_ * capacity_ * head_dim_), 0.0f);
  }
}

void KVBuffer::append(std::span<const LayerCache> entries) {
  if (entries.size() != k_.size()) {
    throw ContractError("KVBuffer::append: expected one cache per layer");
  }
  const int64_t t = entries.front().length();
  if (length_ + t > capacity_) throw ContractError("KVBuffer::append: capacity exceeded");
  for (size_t l = 0; l < entries.size(); ++l) {
    auto kd = entries[l].k.data();
    auto vd = entries[l].v.data();
    for (int64_t h = 0; h < heads_; ++h) {
      std::copy_n(kd.data() + h * t * head_dim_, t * head_dim_,
                  k_[l].data() + (h * capacity_ + length_) * head_dim_);
      std::copy_n(vd.data() + h * t * head_dim_, t * head_dim_,
                  v_[l].data() + (h * capacity_ + length_) * head_dim_);
    }
  }
  length_ += t;
  last_position_ = entries.front().positions.back();
}

KVView KVBuffer::view(int layer) const {
  KVView view;
  view.k = k_[static_cast<size_t>(layer)].data();
  view.v = v_[static_cast<size_t>(layer)].data();
  view.length = length_;
  view.head_stride = capacity_ * head_dim_;
  return view;
}

// --- rotary embedding -----------------------------------------------------------

Tensor apply_rope(const Tensor& x, std::span<const int32_t> positions, double rope_base,
                  int max_position) {
  if (x.rank() != 3 || x.dim(2) % 2 != 0 ||
      x.dim(1) != static_cast<int64_t>(positions.size())) {
    throw DimensionError("apply_rope: expected [H, T, even d_h] with T = " +
                         std::to_string(positions.size()) + ", got " + shape_str(x.shape()));
  }
  const int64_t heads = x.dim(0), t_len = x.dim(1), dh = x.dim(2), half = dh / 2;
  for (int32_t p : positions) {
    if (p < 0 || p >= max_position) {
      throw PositionError("apply_rope: position " + std::to_string(p) + " outside [0, " +
                          std::to_string(max_position) + ")");
    }
  }
  auto table = std::make_shared<std::vector<double>>(static_cast<size_t>(t_len * dh));
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t i = 0; i < half; ++i) {
      const double inv_freq =
          std::pow(rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[t]) * inv_freq;
      (*table)[t * dh + 2 * i] = std::cos(angle);
      (*table)[t * dh + 2 * i + 1] = std::sin(angle);
    }
  }
  auto xd = x.data();
  std::vector<float> out(xd.size());
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t t = 0; t < t_len; ++t) {
      const float* src = xd.data() + (h * t_len + t) * dh;
      float* dst = out.data() + (h * t_len + t) * dh;
      const double* cs = table->data() + t * dh;
      for (int64_t i = 0; i < half; ++i) {
        const double c = cs[2 * i], s = cs[2 * i + 1];
        const double x0 = src[2 * i], x1 = src[2 * i + 1];
        dst[2 * i] = static_cast<float>(x0 * c - x1 * s);
        dst[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
      }
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (!should_record({&x})) return result;
  return record_op("rope", result, {x},
                   [x, table, heads, t_len, dh, half](const Tensor& outp) mutable {
                     auto g = outp.grad();
                     auto gx = x.mutable_grad();
                     for (int64_t h = 0; h < heads; ++h) {
                       for (int64_t t = 0; t < t_len; ++t) {
                         const int64_t base = (h * t_len + t) * dh;
                         const double* cs = table->data() + t * dh;
                         for (int64_t i = 0; i < half; ++i) {
                           const double c = cs[2 * i], s = cs[2 * i + 1];
                           const double g0 = g[base + 2 * i], g1 = g[base + 2 * i + 1];
                           gx[base + 2 * i] += static_cast<float>(g0 * c + g1 * s);
                           gx[base + 2 * i + 1] += static_cast<float>(-g0 * s + g1 * c);
                         }
                       }
                     }
                   });
}

// --- attention ------------------------------------------------------------------

namespace {

std::vector<uint8_t> slot_validity(std::span<const KVView> prefix,
                                   std::span<const uint8_t> self_valid, int64_t t_len) {
  std::vector<uint8_t> ok;
  for (const auto& seg : prefix) {
    for (int64_t s = 0; s < seg.length; ++s) ok.push_back(seg.valid == nullptr || seg.valid[s]);
  }
  for (int64_t s = 0; s < t_len; ++s) ok.push_back(self_valid.empty() || self_valid[s]);
  return ok;
}

// Head h of every slot (prefix segments, then the forward's own rows) laid out
// as [d_h][S] so per-slot dot products vectorize across slots.
void transpose_slots(std::span<const KVView> prefix, const float* self, int64_t h, int64_t t_len,
                     int64_t dh, bool keys, std::vector<float>& out) {
  int64_t total = t_len;
  for (const auto& seg : prefix) total += seg.length;
  out.resize(static_cast<size_t>(total * dh));
  int64_t j = 0;
  auto put = [&](const float* src, int64_t count) {
    for (int64_t s = 0; s < count; ++s, ++j) {
      for (int64_t d = 0; d < dh; ++d) out[d * total + j] = src[s * dh + d];
    }
  };
  for (const auto& seg : prefix) put((keys ? seg.k : seg.v) + h * seg.head_stride, seg.length);
  put(self + h * t_len * dh, t_len);
}

// out[s] = sum_d x[d] * t[d][s] for s < live, summed in ascending d.
void slot_dots(const float* x, const float* t, int64_t stride, int64_t live, int64_t dh,
               double* out) {
  std::fill(out, out + live, 0.0);
  for (int64_t d = 0; d < dh; ++d) {
    const double xd = x[d];
    const float* td = t + d * stride;
    for (int64_t s = 0; s < live; ++s) out[s] += xd * static_cast<double>(td[s]);
  }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const KVView> prefix, std::span<const uint8_t> self_valid,
                 Tensor* weights) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q/k/v must share shape [H, T, d_h], got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  }
  const int64_t heads = q.dim(0), t_len = q.dim(1), dh = q.dim(2);
  if (!self_valid.empty() && static_cast<int64_t>(self_valid.size()) != t_len) {
    throw DimensionError("attention: validity mask length must equal T");
  }
  int64_t s_pre = 0;
  for (const auto& seg : prefix) s_pre += seg.length;
  const int64_t s_total = s_pre + t_len;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  std::vector<float> out(static_cast<size_t>(heads * t_len * dh));
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(heads * t_len * s_total),
                                                     0.0);
  std::vector<double> acc(static_cast<size_t>(dh));
  const auto slot_ok = slot_validity(prefix, self_valid, t_len);
  std::vector<float> kt;

  for (int64_t h = 0; h < heads; ++h) {
    transpose_slots(prefix, kd.data(), h, t_len, dh, true, kt);
    for (int64_t i = 0; i < t_len; ++i) {
      const float* qi = qd.data() + (h * t_len + i) * dh;
      double* row = probs->data() + (h * t_len + i) * s_total;
      // Scores over prefix segments, then causal self slots 0..i. Each score
      // still sums over d in ascending order; the loop runs across slots.
      const int64_t live = s_pre + i + 1;
      slot_dots(qi, kt.data(), s_total, live, dh, row);
      for (int64_t s = 0; s < live; ++s) row[s] = slot_ok[s] ? row[s] * sc : kMaskedScore;
      double mx = row[0];
      for (int64_t s = 1; s < live; ++s) mx = std::max(mx, row[s]);
      double total = 0.0;
      for (int64_t s = 0; s < live; ++s) {
        row[s] = std::exp(row[s] - mx);
        total += row[s];
      }
      const double inv = 1.0 / total;
      for (int64_t s = 0; s < live; ++s) row[s] *= inv;

      std::fill(acc.begin(), acc.end(), 0.0);
      int64_t j = 0;
      for (const auto& seg : prefix) {
        const float* vh = seg.v + h * seg.head_stride;
        for (int64_t s = 0; s < seg.length; ++s, ++j) {
          const double p = row[j];
          if (p == 0.0) continue;
          const float* vs = vh + s * dh;
          for (int64_t d = 0; d < dh; ++d) acc[d] += p * vs[d];
        }
      }
      for (int64_t s = 0; s <= i; ++s) {
        const double p = row[s_pre + s];
        if (p == 0.0) continue;
        const float* vs = vd.data() + (h * t_len + s) * dh;
        for (int64_t d = 0; d < dh; ++d) acc[d] += p * vs[d];
      }
      float* oi = out.data() + (h * t_len + i) * dh;
      for (int64_t d = 0; d < dh; ++d) oi[d] = static_cast<float>(acc[d]);
    }
  }

  if (weights != nullptr) {
    std::vector<float> w(probs->size());
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>((*probs)[i]);
    *weights = Tensor({heads, t_len, s_total}, std::move(w));
  }

  Tensor result(q.shape(), std::move(out));
  if (!should_record({&q, &k, &v})) return result;

  std::vector<KVView> pre(prefix.begin(), prefix.end());
  return record_op(
      "attention", result, {q, k, v},
      [q, k, v, pre = std::move(pre), probs, heads, t_len, dh, s_pre, s_total,
       sc](const Tensor& outp) mutable {
        auto g = outp.grad();
        auto qd = q.data();
        auto kd = k.data();
        auto vd = v.data();
        const size_t n = static_cast<size_t>(heads * t_len * dh);
        std::vector<double> gq(n, 0.0), gk(n, 0.0), gv(n, 0.0);
        std::vector<double> dp(static_cast<size_t>(s_total));
        std::vector<float> vt;
        for (int64_t h = 0; h < heads; ++h) {
          transpose_slots(pre, vd.data(), h, t_len, dh, false, vt);
          for (int64_t i = 0; i < t_len; ++i) {
            const float* gi = g.data() + (h * t_len + i) * dh;
            const double* row = probs->data() + (h * t_len + i) * s_total;
            const int64_t live = s_pre + i + 1;
            slot_dots(gi, vt.data(), s_total, live, dh, dp.data());
            double c = 0.0;
            for (int64_t s = 0; s < live; ++s) c += row[s] * dp[s];
            double* gqi = gq.data() + (h * t_len + i) * dh;
            const float* qi = qd.data() + (h * t_len + i) * dh;
            int64_t j = 0;
            for (const auto& seg : pre) {
              const float* kh = seg.k + h * seg.head_stride;
              for (int64_t s = 0; s < seg.length; ++s, ++j) {
                if (row[j] == 0.0) continue;
                const double ds = row[j] * (dp[j] - c) * sc;
                const float* ks = kh + s * dh;
                for (int64_t d = 0; d < dh; ++d) gqi[d] += ds * ks[d];
              }
            }
            for (int64_t s = 0; s <= i; ++s) {
              const int64_t col = s_pre + s;
              const double p = row[col];
              if (p == 0.0) continue;
              const double ds = p * (dp[col] - c) * sc;
              const float* ks = kd.data() + (h * t_len + s) * dh;
              double* gks = gk.data() + (h * t_len + s) * dh;
              double* gvs = gv.data() + (h * t_len + s) * dh;
              for (int64_t d = 0; d < dh; ++d) {
                gqi[d] += ds * ks[d];
                gks[d] += ds * qi[d];
                gvs[d] += p * gi[d];
              }
            }
          }
        }
        auto flush = [](const Tensor& t, const std::vector<double>& src) {
          if (!t.requires_grad()) return;
          auto gt = t.mutable_grad();
          for (size_t i = 0; i < src.size(); ++i) gt[i] += static_cast<float>(src[i]);
        };
        flush(q, gq);
        flush(k, gk);
        flush(v, gv);
      });
}

// --- forward ------------------------------------------------------------------

ForwardResult decoder_forward(const Model& model, std::span<const int32_t> tokens,
                              std::span<const int32_t> positions, const PrefixCache* prefix,
                              const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  const auto t_len = static_cast<int64_t>(tokens.size());
  if (t_len < 1) throw ContractError("decoder_forward: empty token sequence");
  if (positions.size() != tokens.size()) {
    throw DimensionError("decoder_forward: " + std::to_string(tokens.size()) + " tokens but " +
                         std::to_string(positions.size()) + " positions");
  }
  if (!options.valid.empty() && options.valid.size() != tokens.size()) {
    throw DimensionError("decoder_forward: validity mask length must match tokens");
  }
  for (int64_t t = 0; t < t_len; ++t) {
    if (positions[t] < 0 || positions[t] >= cfg.max_position) {
      throw PositionError("decoder_forward: position " + std::to_string(positions[t]) +
                          " outside [0, " + std::to_string(cfg.max_position) + ")");
    }
    if (t > 0 && positions[t] <= positions[t - 1]) {
      throw PositionError("decoder_forward: positions must be strictly increasing");
    }
  }
  if (prefix != nullptr) {
    if (static_cast<int>(prefix->layers.size()) != cfg.n_layers) {
      throw ContractError("decoder_forward: prefix cache has " +
                          std::to_string(prefix->layers.size()) + " layers, model has " +
                          std::to_string(cfg.n_layers));
    }
    if (positions[0] <= prefix->reserved_until) {
      throw PositionError("decoder_forward: position " + std::to_string(positions[0]) +
                          " overlaps the cache range ending at " +
                          std::to_string(prefix->reserved_until));
    }
  }

  const int64_t d = cfg.hidden_dim, heads = cfg.n_heads, dh = cfg.head_dim;
  ForwardResult result;
  Tensor x = embedding(model.token_embedding, tokens);
  const bool has_invalid =
      std::any_of(options.valid.begin(), options.valid.end(), [](uint8_t b) { return b == 0; });
  if (has_invalid) {
    // Padding slots carry no token content at all.
    std::vector<float> keep(static_cast<size_t>(t_len * d));
    for (int64_t t = 0; t < t_len; ++t)
      std::fill_n(keep.data() + t * d, d, options.valid[t] ? 1.0f : 0.0f);
    x = mul(x, Tensor({t_len, d}, std::move(keep)));
  }

  auto split_heads = [&](const Tensor& a) {
    return transpose01(reshape(a, {t_len, heads, dh}));
  };
  std::vector<int32_t> pos(positions.begin(), positions.end());
  std::vector<uint8_t> valid(options.valid.begin(), options.valid.end());
  if (valid.empty()) valid.assign(static_cast<size_t>(t_len), 1);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = model.layers[static_cast<size_t>(l)];
    Tensor h = rms_norm(x, w.attention_norm, cfg.eps);
    Tensor q = apply_rope(split_heads(matmul(h, w.wq)), pos, cfg.rope_base, cfg.max_position);
    Tensor k = apply_rope(split_heads(matmul(h, w.wk)), pos, cfg.rope_base, cfg.max_position);
    Tensor v = split_heads(matmul(h, w.wv));
    std::span<const KVView> segs;
    if (prefix != nullptr) segs = prefix->layers[static_cast<size_t>(l)];
    Tensor weights;
    Tensor a = attention(q, k, v, segs, options.valid,
                         options.capture_attention ? &weights : nullptr);
    result.cache.push_back(LayerCache{k, v, pos, valid});
    if (options.capture_attention) result.attention.push_back(weights);
    a = reshape(transpose01(a), {t_len, d});
    x = add(x, matmul(a, w.wo));
    h = rms_norm(x, w.ffn_norm, cfg.eps);
    Tensor gated = mul(silu(matmul(h, w.w_gate)), matmul(h, w.w_up));
    x = add(x, matmul(gated, w.w_down));
  }
  if (options.compute_logits) {
    x = rms_norm(x, model.final_norm, cfg.eps);
    result.logits = cfg.tie_embeddings ? matmul(x, transpose2d(model.token_embedding))
                                       : matmul(x, model.lm_head);
  }
  return result;
}

}  // namespace kvfuse
