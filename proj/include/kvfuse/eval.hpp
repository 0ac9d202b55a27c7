#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvfuse/data.hpp"
#include "kvfuse/model.hpp"

namespace kvfuse {

// Lowercase, drop ASCII punctuation, drop the words a/an/the, collapse runs of
// whitespace to one space and trim.
std::string normalize_answer(std::string_view s);

// Text before the first "[RESULT]" marker (the whole string if absent).
std::string_view answer_span(std::string_view prediction);

// True when some normalized answer occurs inside the normalized answer span
// of the prediction. Empty normalized answers never match.
bool em(std::string_view prediction, std::span<const std::string> answers);

// Fraction of indices whose predictions are byte-identical.
double tlm(std::span<const std::string> a, std::span<const std::string> b);

enum class EvalMode { kFusion, kBaseline };
EvalMode eval_mode_from_string(std::string_view s);
std::string_view to_string(EvalMode mode);

struct EvalConfig {
  std::string dataset;
  EvalMode mode = EvalMode::kFusion;
  std::vector<int> positions{0, 2, 4};
  uint64_t shuffle_seed = 0;
  int max_new = 48;
  std::optional<int> limit;
  int n = 64;  // passage slots, must match training

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& config);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct EvalRecord {
  std::string id;
  std::string setting;
  int gold_position = -1;
  std::string prediction;
  std::vector<std::string> answers;
  bool match = false;
  int near_ties = 0;
  std::optional<double> min_gap;

  bool operator==(const EvalRecord&) const = default;
};

struct SettingResult {
  std::string setting;  // "pos<k>", "shuffled" or "natural"
  int gold_position = -1;
  int instances = 0;
  int correct = 0;
  double accuracy = 0.0;

  bool operator==(const SettingResult&) const = default;
};

struct TlmResult {
  double value = 0.0;       // over instances without near-ties
  double raw = 0.0;         // over every compared instance
  int compared = 0;
  int excluded = 0;         // instances with a near-tie step in either setting

  bool operator==(const TlmResult&) const = default;
};

struct EvalReport {
  nlohmann::json config;
  std::vector<SettingResult> settings;
  std::optional<TlmResult> tlm;
  int evaluated = 0;   // instances considered after the limit
  int skipped = 0;     // instances without a usable gold passage
  int tie_instances = 0;
  int invariance_violations = 0;
  std::vector<EvalRecord> records;
  double wall_time_s = 0.0;  // not serialized

  const SettingResult* find(std::string_view setting) const;
  bool operator==(const EvalReport& o) const;
};

// Gold passage moved to `position`, negatives keeping their relative order.
// Returns the permutation of original passage indices.
std::vector<int> gold_order(const QAInstance& instance, int position);

// Shuffled-setting permutation, derived from (shuffle_seed, instance id).
std::vector<int> shuffled_order(const QAInstance& instance, uint64_t shuffle_seed);

// Dataset order, every instance (unanswerable ones included).
EvalReport evaluate(const Model& d_p, const Model& d_t, std::span<const QAInstance> dataset,
                    const EvalConfig& config);

// For each configured position plus the shuffled setting. Instances without a
// gold passage or with too few passages are skipped and counted. When 0 is
// among the positions, TLM between it and the shuffled setting is reported.
// In fusion mode, instances whose predictions differ across settings without
// a near-tie are counted as invariance violations.
EvalReport position_sweep(const Model& d_p, const Model& d_t,
                          std::span<const QAInstance> dataset, const EvalConfig& config);

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

enum class ReportFormat { kJson, kCsv };
// CSV columns: setting,gold_position,instances,correct,accuracy; one row per setting.
void write_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);
EvalReport read_report(const std::filesystem::path& path);

}  // namespace kvfuse
