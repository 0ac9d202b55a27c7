#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "kvfuse/errors.hpp"
#include "kvfuse/fusion.hpp"
#include "reference.hpp"
#include "testutil.hpp"

using namespace kvfuse;
using testutil::bit_equal;
using testutil::max_abs_diff;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
  std::vector<float> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : d) x = static_cast<float>(rng.normal());
  return Tensor(std::move(shape), std::move(d));
}

PassageCache random_cache(Rng& rng, int layers, int heads, int n, int dh) {
  PassageCache c;
  const int pad = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
  for (int l = 0; l < layers; ++l) {
    LayerCache lc;
    lc.k = random_tensor(rng, {heads, n, dh});
    lc.v = random_tensor(rng, {heads, n, dh});
    lc.positions.resize(static_cast<size_t>(n));
    std::iota(lc.positions.begin(), lc.positions.end(), 0);
    lc.valid.assign(static_cast<size_t>(n), 1);
    std::fill_n(lc.valid.begin(), pad, 0);
    c.push_back(std::move(lc));
  }
  return c;
}

std::vector<int> random_order(Rng& rng, int count) {
  std::vector<int> order(static_cast<size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  for (int i = count - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<uint64_t>(i + 1))]);
  }
  return order;
}

// Slice [H, lo:lo+len, dh] out of a [H, T, dh] tensor.
std::vector<float> block(const Tensor& t, int64_t lo, int64_t len) {
  const int64_t heads = t.dim(0), total = t.dim(1), dh = t.dim(2);
  auto d = t.data();
  std::vector<float> out;
  for (int64_t h = 0; h < heads; ++h) {
    const float* src = d.data() + (h * total + lo) * dh;
    out.insert(out.end(), src, src + len * dh);
  }
  return out;
}

struct Setup {
  Model d_p;
  Model d_t;
  PassageBatch batch;
  std::vector<int32_t> query;
};

Setup make_setup(uint64_t seed, int count, int n, int q_len, ModelConfig cfg) {
  Rng rng(seed);
  Setup s{init_model(cfg, seed), init_model(cfg, seed + 1), testutil::random_batch(rng, count, n),
          testutil::random_tokens(rng, q_len)};
  s.d_p.freeze();
  return s;
}

}  // namespace

TEST(ResFuse, ShapesAndBlocksForRandomConfigs) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const int count = 1 + static_cast<int>(rng.below(6));
    const int n = 1 + static_cast<int>(rng.below(9));
    const int heads = 1 + static_cast<int>(rng.below(3));
    const int dh = 2 * (1 + static_cast<int>(rng.below(4)));
    const int layers = 1 + static_cast<int>(rng.below(3));
    std::vector<PassageCache> caches;
    for (int i = 0; i < count; ++i) caches.push_back(random_cache(rng, layers, heads, n, dh));
    const auto order = random_order(rng, count);
    const FusedCache f = res_fuse(caches, order);
    ASSERT_EQ(f.layers.size(), static_cast<size_t>(layers));
    EXPECT_EQ(f.n, n);
    EXPECT_EQ(f.num_passages, count);
    for (int l = 0; l < layers; ++l) {
      const auto& lc = f.layers[l];
      ASSERT_EQ(lc.k.shape(), (Shape{heads, count * n, dh}));
      ASSERT_EQ(lc.v.shape(), (Shape{heads, count * n, dh}));
      ASSERT_EQ(lc.valid.size(), static_cast<size_t>(count * n));
      for (int j = 0; j < count; ++j) {
        const auto& src = caches[order[j]][l];
        EXPECT_TRUE(bit_equal(block(lc.k, j * n, n), src.k.data()));
        EXPECT_TRUE(bit_equal(block(lc.v, j * n, n), src.v.data()));
        for (int s = 0; s < n; ++s) {
          EXPECT_EQ(lc.valid[j * n + s], src.valid[s]);
          EXPECT_EQ(lc.positions[j * n + s], s);
        }
      }
    }
    // Splitting recovers the blocks in fused order.
    const auto back = res_unfuse(f);
    ASSERT_EQ(back.size(), static_cast<size_t>(count));
    for (int j = 0; j < count; ++j) {
      for (int l = 0; l < layers; ++l) {
        EXPECT_TRUE(bit_equal(back[j][l].k.data(), caches[order[j]][l].k.data()));
        EXPECT_EQ(back[j][l].valid, caches[order[j]][l].valid);
      }
    }
  }
}

TEST(ResFuse, SingleCacheIsIdentity) {
  Rng rng(3);
  std::vector<PassageCache> caches{random_cache(rng, 2, 2, 7, 4)};
  const auto f = res_fuse(caches);
  for (int l = 0; l < 2; ++l) {
    EXPECT_TRUE(bit_equal(f.layers[l].k.data(), caches[0][l].k.data()));
    EXPECT_TRUE(bit_equal(f.layers[l].v.data(), caches[0][l].v.data()));
    EXPECT_EQ(f.layers[l].valid, caches[0][l].valid);
  }
}

TEST(ResFuse, RejectsBadOrdersAndMixedShapes) {
  Rng rng(4);
  std::vector<PassageCache> caches{random_cache(rng, 2, 2, 5, 4), random_cache(rng, 2, 2, 5, 4),
                                   random_cache(rng, 2, 2, 5, 4)};
  EXPECT_THROW(res_fuse(caches, std::vector<int>{0, 0, 1}), ContractError);
  EXPECT_THROW(res_fuse(caches, std::vector<int>{0, 1}), ContractError);
  EXPECT_THROW(res_fuse(caches, std::vector<int>{0, 1, 3}), ContractError);
  EXPECT_THROW(res_fuse(std::vector<PassageCache>{}), ContractError);
  auto mixed = caches;
  mixed.push_back(random_cache(rng, 2, 2, 6, 4));
  EXPECT_THROW(res_fuse(mixed), ContractError);
  auto shallow = caches;
  shallow.push_back(random_cache(rng, 1, 2, 5, 4));
  EXPECT_THROW(res_fuse(shallow), ContractError);
}

TEST(Prefill, RequiresFrozenModelAndValidBatch) {
  auto s = make_setup(5, 3, 10, 4, testutil::tiny_config());
  Model open = s.d_t.clone();
  EXPECT_THROW(prefill(open, s.batch), ContractError);
  PassageBatch bad = s.batch;
  bad.tokens[1].push_back(1);
  bad.valid[1].push_back(1);
  EXPECT_THROW(prefill(s.d_p, bad), ContractError);
  bad = s.batch;
  bad.valid[0].back() = 0;
  EXPECT_THROW(prefill(s.d_p, bad), ContractError);
  bad = s.batch;
  bad.valid[2][bad.n - 1] = 1;
  bad.valid[2][bad.n - 2] = 0;
  EXPECT_THROW(prefill(s.d_p, bad), ContractError);
  bad = s.batch;
  bad.n = 2000;
  for (auto& t : bad.tokens) t.assign(2000, 'a');
  for (auto& v : bad.valid) v.assign(2000, 1);
  EXPECT_THROW(prefill(s.d_p, bad), PositionError);
}

TEST(Prefill, BatchMatchesIndividualBitForBit) {
  auto s = make_setup(6, 5, 16, 4, testutil::tiny_config());
  const auto all = prefill(s.d_p, s.batch);
  ASSERT_EQ(all.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    const auto one = prefill_passage(s.d_p, s.batch.tokens[i], s.batch.valid[i]);
    for (size_t l = 0; l < one.size(); ++l) {
      EXPECT_TRUE(bit_equal(one[l].k.data(), all[i][l].k.data()));
      EXPECT_TRUE(bit_equal(one[l].v.data(), all[i][l].v.data()));
    }
  }
  // A one-passage cache is the plain decoder's own cache.
  std::vector<int32_t> pos(16);
  std::iota(pos.begin(), pos.end(), 0);
  ForwardOptions o;
  o.valid = s.batch.valid[0];
  o.compute_logits = false;
  const auto plain = decoder_forward(s.d_p, s.batch.tokens[0], pos, nullptr, o);
  for (size_t l = 0; l < plain.cache.size(); ++l) {
    EXPECT_TRUE(bit_equal(plain.cache[l].k.data(), all[0][l].k.data()));
  }
}

TEST(FusedForward, MatchesOracle) {
  for (bool tied : {false, true}) {
    auto cfg = testutil::tiny_config();
    cfg.tie_embeddings = tied;
    auto s = make_setup(tied ? 8 : 7, 4, 12, 6, cfg);
    const std::vector<int> order{2, 0, 3, 1};
    const auto fused = res_fuse(prefill(s.d_p, s.batch), order);
    const auto out = fused_forward(s.d_t, fused, s.query);

    const auto pp = ref::Params::from_model(s.d_p);
    const auto pt = ref::Params::from_model(s.d_t);
    std::vector<std::vector<ref::KV>> caches;
    for (int i = 0; i < s.batch.size(); ++i) {
      caches.push_back(ref::prefill(pp, s.batch.tokens[i], s.batch.valid[i]));
    }
    const auto prefix = ref::concat(caches, order, cfg.n_heads);
    std::vector<int32_t> pos(s.query.size());
    std::iota(pos.begin(), pos.end(), s.batch.n);
    const auto want = ref::forward(pt, s.query, pos, std::vector<uint8_t>(s.query.size(), 1), prefix);
    auto got = out.logits.data();
    ASSERT_EQ(got.size(), want.logits.size());
    double worst = 0;
    for (size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::fabs(got[i] - want.logits[i]));
    EXPECT_LT(worst, 1e-4) << "tied " << tied;
  }
}

TEST(FusedForward, InvariantUnderPassagePermutation) {
  // Desk-scale shapes: N=5, n=64.
  auto s = make_setup(9, 5, 64, 20, ModelConfig{});
  const auto caches = prefill(s.d_p, s.batch);
  const auto base = fused_forward(s.d_t, res_fuse(caches), s.query);
  Rng rng(10);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const auto order = random_order(rng, 5);
    const auto out = fused_forward(s.d_t, res_fuse(caches, order), s.query);
    worst = std::max(worst, max_abs_diff(base.logits.data(), out.logits.data()));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(FusedForward, PaddingSlotsGetNoAttention) {
  auto s = make_setup(11, 3, 12, 5, testutil::tiny_config());
  const auto fused = res_fuse(prefill(s.d_p, s.batch));
  ForwardOptions o;
  o.capture_attention = true;
  const auto out = fused_forward(s.d_t, fused, s.query, o);
  const auto valid = fused.valid();
  ASSERT_EQ(out.attention.size(), s.d_t.layers.size());
  for (const auto& w : out.attention) {
    const int64_t heads = w.dim(0), t_len = w.dim(1), total = w.dim(2);
    ASSERT_EQ(total, static_cast<int64_t>(valid.size()) + t_len);
    auto d = w.data();
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t t = 0; t < t_len; ++t) {
        const float* row = d.data() + (h * t_len + t) * total;
        double sum = 0;
        for (int64_t j = 0; j < total; ++j) sum += row[j];
        EXPECT_NEAR(sum, 1.0, 1e-5);
        for (size_t j = 0; j < valid.size(); ++j) {
          if (!valid[j]) EXPECT_EQ(row[j], 0.0f);
        }
        for (int64_t j = t + 1; j < t_len; ++j) EXPECT_EQ(row[valid.size() + j], 0.0f);
      }
    }
  }
  // Changing the ids stored in padding slots changes nothing.
  PassageBatch other = s.batch;
  for (int i = 0; i < other.size(); ++i) {
    for (int j = 0; j < other.n; ++j) {
      if (!other.valid[i][j]) other.tokens[i][j] = 'z';
    }
  }
  const auto again = fused_forward(s.d_t, res_fuse(prefill(s.d_p, other)), s.query);
  EXPECT_TRUE(bit_equal(out.logits.data(), again.logits.data()));
}

TEST(FusedForward, PositionOverflowIsRejected) {
  auto cfg = testutil::tiny_config();
  cfg.max_position = 20;
  auto s = make_setup(12, 2, 12, 8, cfg);
  const auto fused = res_fuse(prefill(s.d_p, s.batch));
  EXPECT_NO_THROW(fused_forward(s.d_t, fused, s.query));
  s.query.push_back(1);
  EXPECT_THROW(fused_forward(s.d_t, fused, s.query), PositionError);
  EXPECT_THROW(fused_forward(s.d_t, fused, std::vector<int32_t>{}), ContractError);
}

TEST(Greedy, LowestIdWinsExactTies) {
  std::vector<float> logits{0.5f, 2.0f, 2.0f, -1.0f};
  double gap = -1;
  EXPECT_EQ(greedy_pick(logits, &gap), 1);
  EXPECT_EQ(gap, 0.0);
  logits[3] = 2.5f;
  EXPECT_EQ(greedy_pick(logits, &gap), 3);
  EXPECT_NEAR(gap, 0.5, 1e-7);
}

TEST(Greedy, GenerationIsDeterministicAndOrderInvariant) {
  auto s = make_setup(13, 4, 16, 6, testutil::tiny_config());
  GenerateOptions o;
  o.max_new = 12;
  const auto a = generate_greedy(s.d_p, s.d_t, s.batch, s.query, o);
  const auto b = generate_greedy(s.d_p, s.d_t, s.batch, s.query, o);
  EXPECT_EQ(a.tokens, b.tokens);
  const auto r = generate_greedy(s.d_p, s.d_t, s.batch, s.query, o, std::vector<int>{3, 2, 1, 0});
  EXPECT_EQ(a.tokens, r.tokens);
  EXPECT_LE(static_cast<int>(a.tokens.size()), 12);
  EXPECT_TRUE(a.stopped || a.hit_max_new);
  // Incremental decoding agrees with one full pass over the generated text.
  const auto fused = res_fuse(prefill(s.d_p, s.batch));
  std::vector<int32_t> all = s.query;
  all.insert(all.end(), a.tokens.begin(), a.tokens.end());
  const auto full = fused_forward(s.d_t, fused, all);
  auto lg = full.logits.data();
  const int64_t v = full.logits.dim(1);
  for (size_t i = 0; i < a.tokens.size(); ++i) {
    const size_t row = s.query.size() - 1 + i;
    EXPECT_EQ(greedy_pick(lg.subspan(row * v, v)), a.tokens[i]);
  }
}
