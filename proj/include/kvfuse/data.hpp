#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace kvfuse {

// Byte-level tokenizer: ids 0..255 are raw bytes, specials sit above.
class Tokenizer {
 public:
  static constexpr int32_t kBos = 256;
  static constexpr int32_t kEos = 257;  // also the generation stop token
  static constexpr int32_t kQuestionAnswering = 258;
  static constexpr int32_t kResult = 259;
  static constexpr int32_t kEnd = 260;
  // Left-padding slots reuse the stop token; they are masked everywhere.
  static constexpr int32_t kPad = kEos;
  static constexpr int kVocabSize = 261;

  std::vector<int32_t> encode(std::string_view text) const;
  // Specials render as their marker text ("<s>", "</s>",
  // "<|question_answering|>", "[RESULT]", "[END]").
  std::string decode(std::span<const int32_t> ids) const;

  static bool is_special(int32_t id) { return id >= kBos && id < kVocabSize; }
  static std::string_view special_text(int32_t id);
};

struct Passage {
  std::string title;
  std::string text;
  bool is_gold = false;

  bool operator==(const Passage&) const = default;
};

struct QAInstance {
  std::string id;
  std::string question;
  std::string answer;
  std::string evidence;
  std::vector<Passage> passages;

  // Index of the gold passage; empty for unanswerable instances.
  std::optional<size_t> gold_index() const;
  bool operator==(const QAInstance&) const = default;
};

inline constexpr std::string_view kUnanswerable = "Unanswerable";

// --- templates ----------------------------------------------------------------

// "Title: {TITLE} Context: {TEXT}\n====="
std::string render_passage(const Passage& passage);

struct FormattedPassage {
  std::vector<int32_t> tokens;  // exactly n
  std::vector<uint8_t> valid;   // 0 for left padding
  int truncated = 0;            // content tokens dropped from the left
};

// BOS + rendered passage, keeping the last n-1 content tokens, left-padded to n.
FormattedPassage format_passage(const Passage& passage, const Tokenizer& tokenizer, int n);

struct TargetTokens {
  std::vector<int32_t> q;  // signal token + instruction + question + "Answer:"
  std::vector<int32_t> y;  // answer + [RESULT] (+ evidence) + [END] + stop
};

// Instruction line that follows the <|question_answering|> signal token.
inline constexpr std::string_view kTargetInstruction =
    " Using the provided titles and contexts, answer the given question briefly and provide "
    "the supporting sentences as evidence. \n";

// With include_evidence == false, or an empty evidence string, the target is
// "{ANSWER} [RESULT] [END]".
TargetTokens format_target(std::string_view question, std::string_view answer,
                           std::string_view evidence, const Tokenizer& tokenizer,
                           bool include_evidence = true);

inline constexpr std::string_view kBaselineInstruction =
    "Strictly based on listed documents (titles and contexts) above, answer the given question "
    "clearly and concisely in a single sentence. If none of the documents provide a valid "
    "answer, respond with \"Unanswerable\". ";

std::string render_baseline_prompt(std::span<const Passage> passages, std::string_view question);
// BOS followed by the rendered baseline prompt.
std::vector<int32_t> format_baseline_prompt(std::span<const Passage> passages,
                                            std::string_view question,
                                            const Tokenizer& tokenizer);

// --- synthetic data -----------------------------------------------------------

enum class DistractorStyle {
  kRandom,    // negatives describe unrelated entities
  kNearMiss,  // negative entity names differ from the queried one by one letter
};

DistractorStyle distractor_style_from_string(std::string_view s);
std::string_view to_string(DistractorStyle style);

struct SynthOptions {
  int count = 1;
  int n_passages = 5;
  DistractorStyle style = DistractorStyle::kRandom;
  double unanswerable_rate = 0.1;
  std::string id_prefix = "syn";
};

// Entity/attribute/value facts: "The access code of <entity> is <value>."
// Entities are lowercase letters, values are digits, so a value can never
// occur inside another passage. Deterministic in (seed, options).
std::vector<QAInstance> synth_generate(uint64_t seed, const SynthOptions& options);

// --- JSONL --------------------------------------------------------------------

nlohmann::json to_json(const QAInstance& instance);
// Throws ParseError naming the missing or mistyped field.
QAInstance instance_from_json(const nlohmann::json& j);

std::string to_jsonl(std::span<const QAInstance> instances);
std::vector<QAInstance> parse_jsonl(std::string_view text);
void save_jsonl(std::span<const QAInstance> instances, const std::filesystem::path& path);
std::vector<QAInstance> load_jsonl(const std::filesystem::path& path);

}  // namespace kvfuse
