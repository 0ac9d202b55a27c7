#include "kvfuse/eval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kvfuse/errors.hpp"
#include "kvfuse/fusion.hpp"
#include "kvfuse/parallel.hpp"
#include "kvfuse/rng.hpp"

namespace kvfuse {

std::string normalize_answer(std::string_view s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    lowered.push_back(static_cast<char>(std::tolower(c)));
  }
  std::istringstream words(lowered);
  std::string word, out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

std::string_view answer_span(std::string_view prediction) {
  const auto at = prediction.find("[RESULT]");
  return at == std::string_view::npos ? prediction : prediction.substr(0, at);
}

bool em(std::string_view prediction, std::span<const std::string> answers) {
  if (answers.empty()) throw ContractError("em: no gold answers");
  const std::string pred = normalize_answer(answer_span(prediction));
  for (const auto& a : answers) {
    const std::string gold = normalize_answer(a);
    if (!gold.empty() && pred.find(gold) != std::string::npos) return true;
  }
  return false;
}

double tlm(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.size() != b.size()) {
    throw ContractError("tlm: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                        " predictions");
  }
  if (a.empty()) return 1.0;
  size_t same = 0;
  for (size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

EvalMode eval_mode_from_string(std::string_view s) {
  if (s == "fusion") return EvalMode::kFusion;
  if (s == "baseline") return EvalMode::kBaseline;
  throw ConfigError("unknown eval mode '" + std::string(s) + "'");
}

std::string_view to_string(EvalMode mode) {
  return mode == EvalMode::kFusion ? "fusion" : "baseline";
}

void EvalConfig::validate() const {
  if (max_new < 1) throw ConfigError("eval: max_new must be >= 1");
  if (n < 2) throw ConfigError("eval: n must be >= 2");
  if (limit && *limit < 0) throw ConfigError("eval: limit must be >= 0");
  for (int p : positions)
    if (p < 0) throw ConfigError("eval: positions must be non-negative");
}

nlohmann::json to_json(const EvalConfig& c) {
  nlohmann::json j{{"dataset", c.dataset},
                   {"mode", std::string(to_string(c.mode))},
                   {"positions", c.positions},
                   {"shuffle_seed", c.shuffle_seed},
                   {"max_new", c.max_new},
                   {"n", c.n}};
  j["limit"] = c.limit ? nlohmann::json(*c.limit) : nlohmann::json(nullptr);
  return j;
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  try {
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("mode")) c.mode = eval_mode_from_string(j.at("mode").get<std::string>());
    c.positions = j.value("positions", c.positions);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    c.max_new = j.value("max_new", c.max_new);
    c.n = j.value("n", c.n);
    if (j.contains("limit") && !j.at("limit").is_null()) c.limit = j.at("limit").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
  return c;
}

const SettingResult* EvalReport::find(std::string_view setting) const {
  for (const auto& s : settings)
    if (s.setting == setting) return &s;
  return nullptr;
}

bool EvalReport::operator==(const EvalReport& o) const { return to_json(*this) == to_json(o); }

std::vector<int> gold_order(const QAInstance& instance, int position) {
  const auto gold = instance.gold_index();
  if (!gold) throw ContractError("gold_order: instance " + instance.id + " has no gold passage");
  const auto count = static_cast<int>(instance.passages.size());
  if (position < 0 || position >= count) {
    throw ContractError("gold_order: position " + std::to_string(position) + " out of range");
  }
  std::vector<int> order;
  for (int i = 0; i < count; ++i)
    if (i != static_cast<int>(*gold)) order.push_back(i);
  order.insert(order.begin() + position, static_cast<int>(*gold));
  return order;
}

std::vector<int> shuffled_order(const QAInstance& instance, uint64_t shuffle_seed) {
  Rng rng(derive_seed(shuffle_seed, instance.id));
  return rng.permutation(static_cast<int>(instance.passages.size()));
}

namespace {

struct Setting {
  std::string name;
  int gold_position = -1;
  std::vector<int> order;
};

const Tokenizer kTokenizer;

std::vector<int32_t> query_tokens(const QAInstance& inst) {
  // Only q is needed; the answer argument is a placeholder.
  return format_target(inst.question, "-", "", kTokenizer, false).q;
}

std::vector<Generation> run_settings(const Model& d_p, const Model& d_t, const QAInstance& inst,
                                     const std::vector<Setting>& settings,
                                     const EvalConfig& config) {
  GenerateOptions opts;
  opts.max_new = config.max_new;
  std::vector<Generation> out;
  if (config.mode == EvalMode::kFusion) {
    const auto batch = PassageBatch::from_passages(inst.passages, kTokenizer, config.n);
    const auto caches = prefill(d_p, batch);
    const auto q = query_tokens(inst);
    for (const auto& s : settings) {
      FusedCache fused = res_fuse(caches, s.order);
      out.push_back(generate_from_fused(d_t, fused, q, opts));
    }
  } else {
    for (const auto& s : settings) {
      std::vector<Passage> ordered;
      for (int i : s.order) ordered.push_back(inst.passages[static_cast<size_t>(i)]);
      const auto prompt = format_baseline_prompt(ordered, inst.question, kTokenizer);
      out.push_back(baseline_generate(d_t, prompt, opts));
    }
  }
  return out;
}

EvalRecord make_record(const QAInstance& inst, const Setting& s, const Generation& g) {
  EvalRecord r;
  r.id = inst.id;
  r.setting = s.name;
  r.gold_position = s.gold_position;
  r.prediction = kTokenizer.decode(g.tokens);
  r.answers = {inst.answer};
  r.match = em(r.prediction, r.answers);
  r.near_ties = g.near_ties;
  if (std::isfinite(g.min_gap)) r.min_gap = g.min_gap;
  return r;
}

std::span<const QAInstance> limited(std::span<const QAInstance> dataset, const EvalConfig& c) {
  if (c.limit && static_cast<size_t>(*c.limit) < dataset.size()) {
    return dataset.first(static_cast<size_t>(*c.limit));
  }
  return dataset;
}

void check_models(const Model& d_p, const Model& d_t, const EvalConfig& config) {
  config.validate();
  if (config.mode == EvalMode::kFusion && !(d_p.config == d_t.config)) {
    throw ContractError("eval: prefill and trainable decoders have different shapes");
  }
}

void tally(EvalReport& report, std::vector<SettingResult>& settings) {
  for (auto& s : settings) {
    s.accuracy = s.instances > 0 ? static_cast<double>(s.correct) / s.instances : 0.0;
  }
  report.settings = std::move(settings);
}

}  // namespace

EvalReport evaluate(const Model& d_p, const Model& d_t, std::span<const QAInstance> dataset,
                    const EvalConfig& config) {
  check_models(d_p, d_t, config);
  const auto start = std::chrono::steady_clock::now();
  const auto data = limited(dataset, config);
  std::vector<EvalRecord> records(data.size());
  parallel_for(static_cast<int64_t>(data.size()), [&](int64_t i) {
    const QAInstance& inst = data[static_cast<size_t>(i)];
    Setting s{"natural", -1, {}};
    for (int p = 0; p < static_cast<int>(inst.passages.size()); ++p) s.order.push_back(p);
    if (auto g = inst.gold_index()) s.gold_position = static_cast<int>(*g);
    const auto gens = run_settings(d_p, d_t, inst, {s}, config);
    records[static_cast<size_t>(i)] = make_record(inst, s, gens.front());
  });

  EvalReport report;
  report.config = to_json(config);
  report.evaluated = static_cast<int>(data.size());
  std::vector<SettingResult> settings{{"natural", -1, 0, 0, 0.0}};
  for (const auto& r : records) {
    settings[0].instances += 1;
    settings[0].correct += r.match ? 1 : 0;
    if (r.near_ties > 0) report.tie_instances += 1;
  }
  tally(report, settings);
  report.records = std::move(records);
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

EvalReport position_sweep(const Model& d_p, const Model& d_t,
                          std::span<const QAInstance> dataset, const EvalConfig& config) {
  check_models(d_p, d_t, config);
  if (config.positions.empty()) throw ConfigError("sweep: no positions requested");
  const auto start = std::chrono::steady_clock::now();
  const auto data = limited(dataset, config);
  const int max_position = *std::max_element(config.positions.begin(), config.positions.end());

  // Per instance: one record per position followed by the shuffled one, or
  // nothing when skipped.
  std::vector<std::vector<EvalRecord>> per_instance(data.size());
  parallel_for(static_cast<int64_t>(data.size()), [&](int64_t i) {
    const QAInstance& inst = data[static_cast<size_t>(i)];
    if (!inst.gold_index() || static_cast<int>(inst.passages.size()) <= max_position) return;
    std::vector<Setting> settings;
    for (int p : config.positions) {
      settings.push_back({"pos" + std::to_string(p), p, gold_order(inst, p)});
    }
    Setting shuffled{"shuffled", -1, shuffled_order(inst, config.shuffle_seed)};
    for (size_t b = 0; b < shuffled.order.size(); ++b) {
      if (inst.passages[static_cast<size_t>(shuffled.order[b])].is_gold) {
        shuffled.gold_position = static_cast<int>(b);
      }
    }
    settings.push_back(std::move(shuffled));
    const auto gens = run_settings(d_p, d_t, inst, settings, config);
    auto& out = per_instance[static_cast<size_t>(i)];
    for (size_t s = 0; s < settings.size(); ++s) out.push_back(make_record(inst, settings[s], gens[s]));
  });

  EvalReport report;
  report.config = to_json(config);
  report.evaluated = static_cast<int>(data.size());
  std::vector<SettingResult> settings;
  for (int p : config.positions) settings.push_back({"pos" + std::to_string(p), p, 0, 0, 0.0});
  settings.push_back({"shuffled", -1, 0, 0, 0.0});

  const auto pos0 = std::find(config.positions.begin(), config.positions.end(), 0);
  const bool with_tlm = pos0 != config.positions.end();
  const size_t pos0_index = static_cast<size_t>(pos0 - config.positions.begin());
  std::vector<std::string> tlm_a, tlm_b, raw_a, raw_b;

  for (auto& recs : per_instance) {
    if (recs.empty()) {
      report.skipped += 1;
      continue;
    }
    bool any_tie = false, all_same = true;
    for (size_t s = 0; s < recs.size(); ++s) {
      settings[s].instances += 1;
      settings[s].correct += recs[s].match ? 1 : 0;
      any_tie = any_tie || recs[s].near_ties > 0;
      all_same = all_same && recs[s].prediction == recs.front().prediction;
    }
    if (any_tie) report.tie_instances += 1;
    if (config.mode == EvalMode::kFusion && !all_same && !any_tie) {
      report.invariance_violations += 1;
    }
    if (with_tlm) {
      const EvalRecord& a = recs[pos0_index];
      const EvalRecord& b = recs.back();
      raw_a.push_back(a.prediction);
      raw_b.push_back(b.prediction);
      if (a.near_ties == 0 && b.near_ties == 0) {
        tlm_a.push_back(a.prediction);
        tlm_b.push_back(b.prediction);
      }
    }
    for (auto& r : recs) report.records.push_back(std::move(r));
  }
  if (with_tlm) {
    TlmResult t;
    t.compared = static_cast<int>(raw_a.size());
    t.excluded = static_cast<int>(raw_a.size() - tlm_a.size());
    t.raw = tlm(raw_a, raw_b);
    t.value = tlm(tlm_a, tlm_b);
    report.tlm = t;
  }
  tally(report, settings);
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// --- serialization ------------------------------------------------------------

namespace {

bool valid_utf8(const std::string& s) {
  try {
    (void)nlohmann::json(s).dump();
    return true;
  } catch (const nlohmann::json::type_error&) {
    return false;
  }
}

std::string to_hex(std::string_view s) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out += kDigits[c >> 4];
    out += kDigits[c & 15];
  }
  return out;
}

std::string from_hex(std::string_view h) {
  if (h.size() % 2 != 0) throw ParseError("eval report: odd-length prediction_hex");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw ParseError("eval report: bad hex digit in prediction_hex");
  };
  std::string out;
  for (size_t i = 0; i < h.size(); i += 2) {
    out += static_cast<char>(nibble(h[i]) * 16 + nibble(h[i + 1]));
  }
  return out;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json settings = nlohmann::json::array();
  for (const auto& s : r.settings) {
    settings.push_back({{"setting", s.setting},
                        {"gold_position", s.gold_position},
                        {"instances", s.instances},
                        {"correct", s.correct},
                        {"accuracy", s.accuracy}});
  }
  nlohmann::json records = nlohmann::json::array();
  for (const auto& x : r.records) {
    records.push_back({{"id", x.id},
                       {"setting", x.setting},
                       {"gold_position", x.gold_position},
                       {"answers", x.answers},
                       {"match", x.match},
                       {"near_ties", x.near_ties},
                       {"min_gap", x.min_gap ? nlohmann::json(*x.min_gap) : nlohmann::json()}});
    // Untrained models can emit byte sequences that are not UTF-8; those are
    // stored as hex so the report stays lossless.
    if (valid_utf8(x.prediction)) {
      records.back()["prediction"] = x.prediction;
    } else {
      records.back()["prediction_hex"] = to_hex(x.prediction);
    }
  }
  nlohmann::json tlm_json;
  if (r.tlm) {
    tlm_json = {{"value", r.tlm->value},
                {"raw", r.tlm->raw},
                {"compared", r.tlm->compared},
                {"excluded", r.tlm->excluded}};
  }
  return {{"config", r.config},
          {"settings", std::move(settings)},
          {"tlm", std::move(tlm_json)},
          {"evaluated", r.evaluated},
          {"skipped", r.skipped},
          {"tie_instances", r.tie_instances},
          {"invariance_violations", r.invariance_violations},
          {"records", std::move(records)}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.config = j.at("config");
    for (const auto& s : j.at("settings")) {
      r.settings.push_back({s.at("setting").get<std::string>(), s.at("gold_position").get<int>(),
                            s.at("instances").get<int>(), s.at("correct").get<int>(),
                            s.at("accuracy").get<double>()});
    }
    if (!j.at("tlm").is_null()) {
      const auto& t = j.at("tlm");
      r.tlm = TlmResult{t.at("value").get<double>(), t.at("raw").get<double>(),
                        t.at("compared").get<int>(), t.at("excluded").get<int>()};
    }
    r.evaluated = j.at("evaluated").get<int>();
    r.skipped = j.at("skipped").get<int>();
    r.tie_instances = j.at("tie_instances").get<int>();
    r.invariance_violations = j.at("invariance_violations").get<int>();
    for (const auto& x : j.at("records")) {
      EvalRecord rec;
      rec.id = x.at("id").get<std::string>();
      rec.setting = x.at("setting").get<std::string>();
      rec.gold_position = x.at("gold_position").get<int>();
      rec.prediction = x.contains("prediction_hex")
                           ? from_hex(x.at("prediction_hex").get<std::string>())
                           : x.at("prediction").get<std::string>();
      rec.answers = x.at("answers").get<std::vector<std::string>>();
      rec.match = x.at("match").get<bool>();
      rec.near_ties = x.at("near_ties").get<int>();
      if (!x.at("min_gap").is_null()) rec.min_gap = x.at("min_gap").get<double>();
      r.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  return r;
}

void write_report(const EvalReport& report, const std::filesystem::path& path,
                  ReportFormat format) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  if (format == ReportFormat::kJson) {
    f << to_json(report).dump(2) << '\n';
  } else {
    f << "setting,gold_position,instances,correct,accuracy\n";
    char acc[32];
    for (const auto& s : report.settings) {
      std::snprintf(acc, sizeof acc, "%.6f", s.accuracy);
      f << s.setting << ',' << s.gold_position << ',' << s.instances << ',' << s.correct << ','
        << acc << '\n';
    }
  }
  if (!f) throw IoError("write failed for " + path.string());
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return report_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace kvfuse
