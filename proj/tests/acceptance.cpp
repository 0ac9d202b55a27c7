// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvfuse/eval.hpp"
#include "kvfuse/fusion.hpp"
#include "kvfuse/train.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;
using namespace kvfuse;

namespace {

// Test-set EM of the reference desk-scale run (seed 0). CI accepts +-3 points.
constexpr double kPinnedEm = 0.1117;
constexpr double kPinnedTolerance = 0.03;
constexpr double kEmTarget = 0.90;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(KVFUSE_BIN) + " " + args + " >> " + log.string() + " 2>&1";
  std::fprintf(stderr, "  $ kvfuse %s\n", args.c_str());
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<int> random_order(Rng& rng, int count) { return rng.permutation(count); }

Tensor random_tensor(Rng& rng, Shape shape) {
  std::vector<float> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : d) x = static_cast<float>(rng.normal());
  return Tensor(std::move(shape), std::move(d));
}

// --- individual criteria -------------------------------------------------------

Outcome permutation_invariance() {
  const ModelConfig cfg;  // L=4, hidden=128, 4 heads of 32
  Model d_p = init_model(cfg, 101);
  d_p.freeze();
  const Model d_t = init_model(cfg, 102);
  SynthOptions o;
  o.count = 1;
  o.unanswerable_rate = 0.0;
  const auto inst = synth_generate(103, o).front();
  const auto ex = make_train_example(inst, Tokenizer{}, 64, true);
  std::vector<int32_t> tokens = ex.q;
  tokens.insert(tokens.end(), ex.y.begin(), ex.y.end());
  const auto caches = prefill(d_p, ex.passages);
  const auto base = fused_forward(d_t, res_fuse(caches), tokens).logits;
  Rng rng(104);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto out = fused_forward(d_t, res_fuse(caches, random_order(rng, 5)), tokens).logits;
    worst = std::max(worst, testutil::max_abs_diff(base.data(), out.data()));
  }
  return {worst < 1e-4, fmt("max |logit diff| %.3e over 100 permutations (N=5, n=64)", worst)};
}

Outcome prefill_independence() {
  const ModelConfig cfg;
  Model d_p = init_model(cfg, 201);
  d_p.freeze();
  Rng rng(202);
  int mismatches = 0;
  for (int b = 0; b < 50; ++b) {
    const auto batch = testutil::random_batch(rng, 5, 64);
    const auto all = prefill(d_p, batch);
    for (int i = 0; i < batch.size(); ++i) {
      const auto one = prefill_passage(d_p, batch.tokens[i], batch.valid[i]);
      for (size_t l = 0; l < one.size(); ++l) {
        mismatches += !testutil::bit_equal(one[l].k.data(), all[i][l].k.data()) ||
                      !testutil::bit_equal(one[l].v.data(), all[i][l].v.data());
      }
    }
  }
  return {mismatches == 0, fmt("50 batches of 5 passages, %d layer caches differ", mismatches)};
}

Outcome gradient_soundness() {
  double worst = 0;
  int groups = 0, thin = 0;
  std::string worst_name;
  for (const auto& g : testutil::fusion_gradcheck(301, 20, 1e-3, 1e-6)) {
    ++groups;
    thin += g.checked < 20;
    if (g.worst_rel >= worst) {
      worst = g.worst_rel;
      worst_name = g.name;
    }
  }
  return {worst < 1e-3 && thin == 0 && groups > 0,
          fmt("%d parameter groups x 20 coordinates, worst rel err %.2e (%s)", groups, worst,
              worst_name.c_str())};
}

Outcome frozen_prefill() {
  const ModelConfig cfg;
  Model d_p = init_model(cfg, 401);
  d_p.freeze();
  Model d_t = init_model(cfg, 401);
  auto snap = [](const Model& m) {
    std::vector<std::vector<float>> s;
    for (const auto& p : m.parameters()) s.emplace_back(p.data().begin(), p.data().end());
    return s;
  };
  const auto p0 = snap(d_p), t0 = snap(d_t);
  SynthOptions o;
  o.count = 200;
  std::vector<TrainExample> data;
  for (const auto& inst : synth_generate(402, o)) {
    data.push_back(make_train_example(inst, Tokenizer{}, 64, true));
  }
  TrainConfig tc;
  tc.total_steps = 200;
  tc.seed = 403;
  TrainState st;
  train(d_p, d_t, data, tc, st);
  bool grads = false;
  for (const auto& p : d_p.parameters()) grads = grads || p.has_grad();
  const bool p_same = snap(d_p) == p0, t_moved = snap(d_t) != t0;
  return {p_same && t_moved && !grads,
          fmt("200 steps: prefill params %s, trainable params %s, prefill grads %s",
              p_same ? "bit-identical" : "CHANGED", t_moved ? "updated" : "UNCHANGED",
              grads ? "ALLOCATED" : "none")};
}

Outcome res_bijectivity() {
  Rng rng(801);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int count = 1 + static_cast<int>(rng.below(8));
    const int n = 1 + static_cast<int>(rng.below(16));
    const int heads = 1 + static_cast<int>(rng.below(4));
    const int dh = 2 * (1 + static_cast<int>(rng.below(8)));
    const int layers = 1 + static_cast<int>(rng.below(4));
    std::vector<PassageCache> caches(static_cast<size_t>(count));
    for (auto& c : caches) {
      for (int l = 0; l < layers; ++l) {
        LayerCache lc{random_tensor(rng, {heads, n, dh}), random_tensor(rng, {heads, n, dh}), {}, {}};
        lc.positions.resize(static_cast<size_t>(n));
        std::iota(lc.positions.begin(), lc.positions.end(), 0);
        lc.valid.assign(static_cast<size_t>(n), 1);
        c.push_back(std::move(lc));
      }
    }
    const auto order = random_order(rng, count);
    const auto fused = res_fuse(caches, order);
    for (const auto& lc : fused.layers) {
      bad += lc.k.shape() != Shape{heads, int64_t{count} * n, dh};
      bad += lc.v.shape() != Shape{heads, int64_t{count} * n, dh};
    }
    const auto back = res_unfuse(fused);
    for (int j = 0; j < count; ++j) {
      for (int l = 0; l < layers; ++l) {
        bad += !testutil::bit_equal(back[j][l].k.data(), caches[order[j]][l].k.data());
        bad += !testutil::bit_equal(back[j][l].v.data(), caches[order[j]][l].v.data());
      }
    }
  }
  return {bad == 0, fmt("100 random (N, n, H, d_h) configurations, %d mismatches", bad)};
}

// --- end-to-end criteria ---------------------------------------------------------

struct Env {
  fs::path work;
  uint64_t seed = 0;
  fs::path full() const { return work / "full"; }
  fs::path log() const { return work / "cli.log"; }
};

Outcome learning(const Env& env, bool reuse) {
  const auto t0 = Clock::now();
  const std::string base = "--seed " + std::to_string(env.seed) + " --out " + env.full().string();
  const bool have = reuse && fs::exists(env.full() / "model.kvf");
  if (!have) {
    if (cli("synth --force " + base, env.log()) != 0) return {false, "synth failed"};
    if (cli("train --force " + base, env.log()) != 0) return {false, "train failed"};
  }
  if (cli("eval " + base, env.log()) != 0) return {false, "eval failed"};
  const double secs = seconds_since(t0);
  const auto report = read_report(env.full() / "eval_report.json");
  const auto* s = report.find("natural");
  if (s == nullptr) return {false, "no natural setting in report"};
  const bool target = s->accuracy >= kEmTarget;
  const bool pinned = std::fabs(s->accuracy - kPinnedEm) <= kPinnedTolerance;
  const bool fast = have || secs < 30 * 60;
  return {target && pinned && fast && s->instances >= 500,
          fmt("test EM %.4f (%d/%d), target >= %.2f, pinned %.4f +- %.2f, %.0fs%s", s->accuracy,
              s->correct, s->instances, kEmTarget, kPinnedEm, kPinnedTolerance, secs,
              have ? " (reused checkpoint)" : "")};
}

Outcome token_level_match(const Env& env) {
  const auto t0 = Clock::now();
  const std::string base = "--seed " + std::to_string(env.seed) + " --out " + env.full().string();
  if (cli("tlm " + base, env.log()) != 0) return {false, "tlm command failed"};
  const double secs = seconds_since(t0);
  const auto r = read_report(env.full() / "tlm_report.json");
  if (!r.tlm) return {false, "no TLM in report"};
  const auto& t = *r.tlm;
  const bool ok = t.value == 1.0 && t.excluded < 0.01 * t.compared && t.compared >= 500 && secs < 300;
  return {ok, fmt("TLM %.4f over %d dev instances, %d near-tie exclusions, %.0fs", t.value,
                  t.compared, t.excluded, secs)};
}

Outcome sweep_flatness(const Env& env) {
  const auto t0 = Clock::now();
  const std::string base = "--seed " + std::to_string(env.seed) + " --out " + env.full().string();
  if (cli("sweep --positions 0,1,2,3,4 " + base, env.log()) != 0) return {false, "sweep failed"};
  const double secs = seconds_since(t0);
  const auto r = read_report(env.full() / "sweep_report.json");
  std::set<int> correct;
  std::string accs;
  for (const auto& s : r.settings) {
    if (s.setting.rfind("pos", 0) != 0) continue;
    correct.insert(s.correct);
    accs += fmt("%s%.4f", accs.empty() ? "" : " ", s.accuracy);
  }
  std::map<std::string, std::set<std::string>> preds;
  for (const auto& rec : r.records) preds[rec.id].insert(rec.prediction);
  int differing = 0;
  for (const auto& [id, p] : preds) differing += p.size() != 1;
  const bool ok = correct.size() == 1 && differing == 0 && r.invariance_violations == 0 && secs < 600;
  return {ok, fmt("EM by gold position [%s], %d instances with differing predictions, %.0fs",
                  accs.c_str(), differing, secs)};
}

Outcome determinism(const Env& env) {
  const fs::path a = env.work / "det_a", b = env.work / "det_b";
  const nlohmann::json cfg{
      {"seed", 12345},
      {"model", {{"n_layers", 2}, {"n_heads", 2}, {"head_dim", 16}, {"mlp_dim", 64}}},
      {"synth", {{"train_count", 64}, {"dev_count", 16}, {"test_count", 16}}},
      {"train", {{"total_steps", 30}}},
      {"eval", {{"max_new", 16}}}};
  fs::create_directories(env.work);
  std::ofstream(env.work / "det.json") << cfg.dump(2);
  for (const auto& out : {a, b}) {
    const std::string base =
        "--config " + (env.work / "det.json").string() + " --out " + out.string();
    if (cli("synth --force " + base, env.log()) != 0 || cli("train --force " + base, env.log()) != 0 ||
        cli("eval " + base, env.log()) != 0 || cli("sweep " + base, env.log()) != 0) {
      return {false, "end-to-end run failed"};
    }
  }
  int compared = 0, differ = 0;
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "prefill.kvf", "model.kvf",
                        "eval_report.json", "eval_report.csv", "sweep_report.json",
                        "sweep_report.csv"}) {
    const std::string x = slurp(a / f), y = slurp(b / f);
    ++compared;
    differ += x.empty() || x != y;
  }
  return {differ == 0, fmt("%d artifacts compared across two runs, %d differ", compared, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Env env;
  env.work = fs::temp_directory_path() / "kvfuse_acceptance";
  std::string work = env.work.string();
  bool reuse = false;
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--seed", env.seed, "root seed of the desk-scale run");
  app.add_flag("--reuse", reuse, "reuse an existing trained checkpoint in --work");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  env.work = work;
  fs::create_directories(env.work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, permutation_invariance},
      {4, prefill_independence},
      {5, gradient_soundness},
      {6, frozen_prefill},
      {8, res_bijectivity},
      {7, [&] { return learning(env, reuse); }},
      {2, [&] { return token_level_match(env); }},
      {3, [&] { return sweep_flatness(env); }},
      {9, [&] { return determinism(env); }},
  };
  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::fprintf(stderr, "AC%d ...\n", id);
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    lines[id] = fmt("AC%d %s  %s [%.1fs]", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                    seconds_since(t0));
    std::fprintf(stderr, "%s\n", lines[id].c_str());
  }
  for (const auto& [id, line] : lines) std::printf("%s\n", line.c_str());
  return all ? 0 : 1;
}
