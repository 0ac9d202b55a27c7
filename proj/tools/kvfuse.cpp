#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kvfuse/data.hpp"
#include "kvfuse/errors.hpp"
#include "kvfuse/eval.hpp"
#include "kvfuse/fusion.hpp"
#include "kvfuse/model.hpp"
#include "kvfuse/rng.hpp"
#include "kvfuse/run_config.hpp"
#include "kvfuse/train.hpp"

namespace fs = std::filesystem;
using namespace kvfuse;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitContract = 2;
constexpr int kExitIo = 3;

struct Flags {
  std::optional<std::string> config;
  Overrides o;
  std::optional<std::string> positions;
  bool force = false;
  bool resume = false;
  bool untrained = false;
  int permutations = 25;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.o.seed, "root seed");
  cmd->add_option("--out", f.o.out, "output directory");
  cmd->add_option("--data", f.o.data, "dataset directory (default: --out)");
  cmd->add_option("--n-passages", f.o.n_passages, "passages per instance");
}

void add_eval_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--dataset", f.o.dataset, "JSONL dataset to evaluate");
  cmd->add_option("--limit", f.o.limit, "evaluate the first LIMIT instances");
  cmd->add_option("--mode", f.o.mode, "fusion or baseline")->check(CLI::IsMember({"fusion", "baseline"}));
  cmd->add_option("--positions", f.positions, "gold positions, e.g. 0,2,4");
  cmd->add_option("--shuffle-seed", f.o.shuffle_seed, "seed for the shuffled setting");
  cmd->add_option("--max-new", f.o.max_new, "maximum generated tokens");
}

RunConfig resolve(Flags& f) {
  if (f.positions) f.o.positions = parse_int_list(*f.positions);
  std::optional<fs::path> path;
  if (f.config) path = *f.config;
  return load_run_config(path, f.o);
}

void archive(const RunConfig& c, const std::string& cmd) {
  fs::create_directories(c.out);
  write_file(fs::path(c.out) / ("config_" + cmd + ".json"), to_json(c).dump(2) + "\n");
}

fs::path prefill_path(const RunConfig& c) { return fs::path(c.out) / "prefill.kvf"; }
fs::path model_path(const RunConfig& c) { return fs::path(c.out) / "model.kvf"; }

Model load_model(const fs::path& path) { return load_checkpoint(read_file(path)); }

int cmd_synth(const RunConfig& c, bool force) {
  fs::create_directories(c.data_dir());
  struct Split {
    const char* name;
    int count;
  };
  const Split splits[] = {{"train", c.synth.train_count},
                          {"dev", c.synth.dev_count},
                          {"test", c.synth.test_count}};
  for (const auto& s : splits) {
    const fs::path path = c.data_dir() / (std::string(s.name) + ".jsonl");
    if (fs::exists(path) && !force) {
      throw IoError(path.string() + " exists (use --force to overwrite)");
    }
  }
  for (const auto& s : splits) {
    SynthOptions opts;
    opts.count = s.count;
    opts.n_passages = c.synth.n_passages;
    opts.style = c.synth.style;
    opts.unanswerable_rate = c.synth.unanswerable_rate;
    opts.id_prefix = s.name;
    const auto data = synth_generate(derive_seed(c.seed, std::string("data.") + s.name), opts);
    const fs::path path = c.data_dir() / (std::string(s.name) + ".jsonl");
    save_jsonl(data, path);
    std::cout << s.name << ": " << data.size() << " instances -> " << path.string() << "\n";
  }
  return 0;
}

nlohmann::json checkpoint_meta(const RunConfig& c, int64_t step, const char* role) {
  return {{"role", role}, {"step", step}, {"seed", c.seed}, {"train", to_json(c.train)}};
}

int cmd_train(const RunConfig& c, bool force, bool resume) {
  const fs::path out = c.out;
  fs::create_directories(out);
  if (!resume && fs::exists(model_path(c)) && !force) {
    throw IoError(model_path(c).string() + " exists (use --resume or --force)");
  }
  const Tokenizer tok;
  const auto instances = load_jsonl(c.data_dir() / "train.jsonl");
  std::vector<TrainExample> examples;
  examples.reserve(instances.size());
  for (const auto& inst : instances) {
    if (static_cast<int>(inst.passages.size()) != c.train.n_passages) {
      throw ContractError("instance " + inst.id + " has " + std::to_string(inst.passages.size()) +
                          " passages, expected " + std::to_string(c.train.n_passages));
    }
    examples.push_back(make_train_example(inst, tok, c.train.n, c.train.evidence_supervision));
  }

  Model d_p = init_model(c.model, c.seed);
  d_p.freeze();
  Model d_t = init_model(c.model, c.seed);
  TrainState state;
  if (resume) {
    const Checkpoint ck = read_checkpoint(read_file(model_path(c)));
    if (!(ck.model.config == c.model)) throw ConfigError("checkpoint model config differs");
    d_t = ck.model;
    d_t.unfreeze();
    state.step = ck.meta.value("step", int64_t{0});
    state.optimizer = optimizer_from_tensors(d_t, ck.extra, state.step);
    std::cout << "resuming at step " << state.step << "\n";
  } else {
    write_file(prefill_path(c), save_checkpoint(d_p, checkpoint_meta(c, 0, "prefill")));
  }

  std::ofstream log(out / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open train log in " + out.string());
  auto save = [&](const Model& m, const TrainState& s) {
    write_file(model_path(c), save_checkpoint(m, checkpoint_meta(c, s.step, "trainable"),
                                              optimizer_tensors(m, s.optimizer)));
  };
  TrainHooks hooks;
  hooks.checkpoint_every = c.checkpoint_every;
  hooks.on_checkpoint = save;
  hooks.on_log = [&](const TrainLogEntry& e) {
    if (e.step % c.log_every != 0 && e.step != c.train.total_steps) return;
    const nlohmann::json line{
        {"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"elapsed_s", e.elapsed_s}};
    log << line.dump() << "\n" << std::flush;
    std::printf("step %6lld  loss %.4f  lr %.2e  %.0fs\n", static_cast<long long>(e.step), e.loss,
                e.lr, e.elapsed_s);
    std::fflush(stdout);
  };
  train(d_p, d_t, examples, c.train, state, hooks);
  save(d_t, state);
  std::cout << "checkpoint -> " << model_path(c).string() << " (step " << state.step << ")\n";
  return 0;
}

std::vector<QAInstance> eval_dataset(const RunConfig& c, const char* default_split) {
  const fs::path path = c.eval.dataset.empty()
                            ? c.data_dir() / (std::string(default_split) + ".jsonl")
                            : fs::path(c.eval.dataset);
  return load_jsonl(path);
}

void print_settings(const EvalReport& r) {
  for (const auto& s : r.settings) {
    std::printf("%-10s EM %.4f (%d/%d)\n", s.setting.c_str(), s.accuracy, s.correct, s.instances);
  }
  if (r.skipped > 0) std::printf("skipped %d instances\n", r.skipped);
  std::printf("near-tie instances %d, wall time %.1fs\n", r.tie_instances, r.wall_time_s);
}

void write_both(const EvalReport& r, const RunConfig& c, const std::string& stem) {
  write_report(r, fs::path(c.out) / (stem + ".json"), ReportFormat::kJson);
  write_report(r, fs::path(c.out) / (stem + ".csv"), ReportFormat::kCsv);
}

int cmd_eval(const RunConfig& c) {
  const auto data = eval_dataset(c, "test");
  const Model d_t = load_model(model_path(c));
  const Model d_p = c.eval.mode == EvalMode::kFusion ? load_model(prefill_path(c)) : d_t;
  const EvalReport r = evaluate(d_p, d_t, data, c.eval);
  write_both(r, c, "eval_report");
  print_settings(r);
  return 0;
}

int cmd_sweep(const RunConfig& c) {
  const auto data = eval_dataset(c, "dev");
  const Model d_t = load_model(model_path(c));
  const Model d_p = c.eval.mode == EvalMode::kFusion ? load_model(prefill_path(c)) : d_t;
  const EvalReport r = position_sweep(d_p, d_t, data, c.eval);
  write_both(r, c, "sweep_report");
  print_settings(r);
  if (r.tlm) std::printf("TLM %.4f (raw %.4f, %d near-tie exclusions)\n", r.tlm->value, r.tlm->raw, r.tlm->excluded);
  if (c.eval.mode == EvalMode::kFusion && r.invariance_violations > 0) {
    std::printf("invariance violations: %d\n", r.invariance_violations);
    return kExitContract;
  }
  return 0;
}

int cmd_tlm(RunConfig c) {
  c.eval.positions = {0};
  const auto data = eval_dataset(c, "dev");
  const Model d_t = load_model(model_path(c));
  const Model d_p = c.eval.mode == EvalMode::kFusion ? load_model(prefill_path(c)) : d_t;
  const EvalReport r = position_sweep(d_p, d_t, data, c.eval);
  write_report(r, fs::path(c.out) / "tlm_report.json", ReportFormat::kJson);
  std::printf("TLM %.4f over %d instances (raw %.4f, %d near-tie exclusions)\n", r.tlm->value,
              r.tlm->compared - r.tlm->excluded, r.tlm->raw, r.tlm->excluded);
  if (c.eval.mode == EvalMode::kFusion && r.invariance_violations > 0) return kExitContract;
  return 0;
}

int cmd_invariance(const RunConfig& c, bool untrained, int permutations) {
  if (permutations < 1) throw ConfigError("--permutations must be >= 1");
  Model d_p = init_model(c.model, c.seed);
  d_p.freeze();
  Model d_t = d_p.clone();
  if (!untrained && fs::exists(model_path(c))) {
    d_p = load_model(prefill_path(c));
    d_t = load_model(model_path(c));
  }
  SynthOptions opts;
  opts.count = c.eval.limit.value_or(4);
  opts.n_passages = c.synth.n_passages;
  opts.id_prefix = "inv";
  const auto data = synth_generate(derive_seed(c.seed, "invariance"), opts);
  const Tokenizer tok;
  Rng rng(derive_seed(c.seed, "invariance.orders"));
  double worst = 0.0;
  for (const auto& inst : data) {
    const auto ex = make_train_example(inst, tok, c.train.n, true);
    const auto caches = prefill(d_p, ex.passages);
    std::vector<int32_t> tokens = ex.q;
    tokens.insert(tokens.end(), ex.y.begin(), ex.y.end());
    const auto ref = fused_forward(d_t, res_fuse(caches), tokens).logits;
    for (int p = 0; p < permutations; ++p) {
      const auto order = rng.permutation(ex.passages.size());
      const auto got = fused_forward(d_t, res_fuse(caches, order), tokens).logits;
      for (size_t i = 0; i < ref.data().size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::fabs(ref.data()[i] - got.data()[i])));
      }
    }
  }
  const bool pass = worst < 1e-4;
  const nlohmann::json report{{"instances", data.size()},
                              {"permutations", permutations},
                              {"max_abs_diff", worst},
                              {"tolerance", 1e-4},
                              {"passed", pass}};
  write_file(fs::path(c.out) / "invariance.json", report.dump(2) + "\n");
  std::printf("max |logit diff| %.3e over %zu instances x %d permutations: %s\n", worst,
              data.size(), permutations, pass ? "PASS" : "FAIL");
  return pass ? 0 : kExitContract;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Position-invariant passage fusion through per-passage KV caches"};
  app.require_subcommand(1);
  Flags f;

  auto* synth = app.add_subcommand("synth", "generate train/dev/test JSONL");
  add_common(synth, f);
  synth->add_flag("--force", f.force, "overwrite existing files");

  auto* train_cmd = app.add_subcommand("train", "train the decoder on fused caches");
  add_common(train_cmd, f);
  train_cmd->add_option("--steps", f.o.steps, "total optimizer steps");
  train_cmd->add_flag("--force", f.force, "overwrite an existing checkpoint");
  train_cmd->add_flag("--resume", f.resume, "continue from the checkpoint in --out");

  auto* eval_cmd = app.add_subcommand("eval", "EM on a dataset in its stored order");
  auto* sweep_cmd = app.add_subcommand("sweep", "EM per gold position plus shuffled");
  auto* tlm_cmd = app.add_subcommand("tlm", "token-level match, gold-first vs shuffled");
  for (auto* cmd : {eval_cmd, sweep_cmd, tlm_cmd}) {
    add_common(cmd, f);
    add_eval_flags(cmd, f);
  }

  auto* inv_cmd = app.add_subcommand("invariance", "logit check over random passage orders");
  add_common(inv_cmd, f);
  inv_cmd->add_option("--limit", f.o.limit, "number of instances");
  inv_cmd->add_option("--permutations", f.permutations, "permutations per instance");
  inv_cmd->add_flag("--untrained", f.untrained, "use a freshly initialized model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    RunConfig c = resolve(f);
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    archive(c, name);
    if (name == "synth") return cmd_synth(c, f.force);
    if (name == "train") return cmd_train(c, f.force, f.resume);
    if (name == "eval") return cmd_eval(c);
    if (name == "sweep") return cmd_sweep(c);
    if (name == "tlm") return cmd_tlm(c);
    return cmd_invariance(c, f.untrained, f.permutations);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  }
}
