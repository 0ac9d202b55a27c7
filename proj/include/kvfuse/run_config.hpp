#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvfuse/data.hpp"
#include "kvfuse/eval.hpp"
#include "kvfuse/model.hpp"
#include "kvfuse/train.hpp"

namespace kvfuse {

struct SynthConfig {
  int train_count = 5000;
  int dev_count = 600;
  int test_count = 600;
  int n_passages = 5;
  DistractorStyle style = DistractorStyle::kRandom;
  double unanswerable_rate = 0.1;
};

// Everything a subcommand needs, fully resolved before it runs.
struct RunConfig {
  uint64_t seed = 0;
  std::string out = "run";
  std::string data;  // dataset directory; defaults to `out`
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  SynthConfig synth;
  int checkpoint_every = 500;
  int log_every = 10;

  std::filesystem::path data_dir() const { return data.empty() ? out : data; }
};

// Command-line values; set fields win over the config file.
struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> dataset;
  std::optional<int> steps;
  std::optional<int> limit;
  std::optional<int> n_passages;
  std::optional<std::string> mode;
  std::optional<std::vector<int>> positions;
  std::optional<uint64_t> shuffle_seed;
  std::optional<int> max_new;
};

// Per-subsystem seeds come from the root seed unless the file pins them:
// train.seed = derive_seed(seed, "train"), eval.shuffle_seed =
// derive_seed(seed, "eval.shuffle"); synth splits use derive_seed(seed,
// "data.<split>") and model init uses `seed` directly.
RunConfig resolve_run_config(const nlohmann::json& file, const Overrides& overrides);
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const Overrides& overrides);

nlohmann::json to_json(const RunConfig& config);

// "0,2,4" -> {0, 2, 4}
std::vector<int> parse_int_list(std::string_view text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace kvfuse
