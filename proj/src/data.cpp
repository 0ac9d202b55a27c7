#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kvfuse/data.hpp"
#include "kvfuse/errors.hpp"
#include "kvfuse/rng.hpp"

namespace kvfuse {

std::optional<size_t> QAInstance::gold_index() const {
  for (size_t i = 0; i < passages.size(); ++i)
    if (passages[i].is_gold) return i;
  return std::nullopt;
}

// --- templates ----------------------------------------------------------------

std::string render_passage(const Passage& passage) {
  return "Title: " + passage.title + " Context: " + passage.text + "\n=====";
}

FormattedPassage format_passage(const Passage& passage, const Tokenizer& tokenizer, int n) {
  if (n < 2) throw ContractError("format_passage: n must leave room for BOS and content");
  std::vector<int32_t> content = tokenizer.encode(render_passage(passage));
  FormattedPassage out;
  const auto room = static_cast<size_t>(n - 1);
  if (content.size() > room) {
    out.truncated = static_cast<int>(content.size() - room);
    content.erase(content.begin(), content.begin() + out.truncated);
  }
  const size_t pad = room - content.size();
  out.tokens.assign(pad, Tokenizer::kPad);
  out.valid.assign(pad, 0);
  out.tokens.push_back(Tokenizer::kBos);
  out.tokens.insert(out.tokens.end(), content.begin(), content.end());
  out.valid.resize(static_cast<size_t>(n), 1);
  return out;
}

TargetTokens format_target(std::string_view question, std::string_view answer,
                           std::string_view evidence, const Tokenizer& tokenizer,
                           bool include_evidence) {
  if (question.empty() || answer.empty()) {
    throw ContractError("format_target: question and answer must be nonempty");
  }
  auto append = [&tokenizer](std::vector<int32_t>& dst, std::string_view text) {
    auto ids = tokenizer.encode(text);
    dst.insert(dst.end(), ids.begin(), ids.end());
  };
  TargetTokens out;
  out.q.push_back(Tokenizer::kQuestionAnswering);
  append(out.q, kTargetInstruction);
  append(out.q, "Question: ");
  append(out.q, question);
  append(out.q, "? \nAnswer:");

  append(out.y, " ");
  append(out.y, answer);
  append(out.y, " ");
  out.y.push_back(Tokenizer::kResult);
  if (include_evidence && !evidence.empty()) {
    append(out.y, " \nEvidence: ");
    append(out.y, evidence);
    append(out.y, " ");
  } else {
    append(out.y, " ");
  }
  out.y.push_back(Tokenizer::kEnd);
  out.y.push_back(Tokenizer::kEos);
  return out;
}

std::string render_baseline_prompt(std::span<const Passage> passages, std::string_view question) {
  std::string out;
  for (const auto& p : passages) {
    out += render_passage(p);
    out += '\n';
  }
  out += kBaselineInstruction;
  out += "Question: ";
  out += question;
  out += "? ANSWER:";
  return out;
}

std::vector<int32_t> format_baseline_prompt(std::span<const Passage> passages,
                                            std::string_view question,
                                            const Tokenizer& tokenizer) {
  std::vector<int32_t> ids{Tokenizer::kBos};
  auto body = tokenizer.encode(render_baseline_prompt(passages, question));
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

// --- synthetic data -----------------------------------------------------------

DistractorStyle distractor_style_from_string(std::string_view s) {
  if (s == "random") return DistractorStyle::kRandom;
  if (s == "near_miss") return DistractorStyle::kNearMiss;
  throw ConfigError("unknown distractor style '" + std::string(s) + "'");
}

std::string_view to_string(DistractorStyle style) {
  return style == DistractorStyle::kRandom ? "random" : "near_miss";
}

namespace {

constexpr int kEntityLength = 5;
constexpr int kValueLength = 4;

std::string random_entity(Rng& rng) {
  std::string s(kEntityLength, 'a');
  for (auto& c : s) c = static_cast<char>('a' + rng.below(26));
  return s;
}

std::string random_value(Rng& rng) {
  std::string s(kValueLength, '0');
  for (auto& c : s) c = static_cast<char>('0' + rng.below(10));
  return s;
}

std::string fact_sentence(const std::string& entity, const std::string& value) {
  return "The access code of " + entity + " is " + value + ".";
}

std::vector<std::string> distinct_entities(Rng& rng, int count, DistractorStyle style) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  const std::string anchor = random_entity(rng);
  out.push_back(anchor);
  seen.insert(anchor);
  while (static_cast<int>(out.size()) < count) {
    std::string e;
    if (style == DistractorStyle::kNearMiss) {
      e = anchor;
      e[rng.below(kEntityLength)] = static_cast<char>('a' + rng.below(26));
    } else {
      e = random_entity(rng);
    }
    if (seen.insert(e).second) out.push_back(e);
  }
  return out;
}

std::vector<std::string> distinct_values(Rng& rng, int count) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  while (static_cast<int>(out.size()) < count) {
    std::string v = random_value(rng);
    if (seen.insert(v).second) out.push_back(v);
  }
  return out;
}

std::string instance_id(const std::string& prefix, int index) {
  std::ostringstream os;
  os << prefix << '-';
  os.width(6);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

std::vector<QAInstance> synth_generate(uint64_t seed, const SynthOptions& options) {
  if (options.count < 1) throw ConfigError("synth_generate: count must be >= 1");
  if (options.n_passages < 2) throw ConfigError("synth_generate: need at least 2 passages");
  if (options.unanswerable_rate < 0.0 || options.unanswerable_rate > 1.0) {
    throw ConfigError("synth_generate: unanswerable_rate must be in [0, 1]");
  }
  Rng rng(derive_seed(seed, "synth"));
  const int n = options.n_passages;
  std::vector<QAInstance> out;
  out.reserve(static_cast<size_t>(options.count));
  for (int i = 0; i < options.count; ++i) {
    const bool answerable = rng.uniform() >= options.unanswerable_rate;
    // Entity 0 is the queried one; for unanswerable instances it gets no passage.
    auto entities = distinct_entities(rng, answerable ? n : n + 1, options.style);
    auto values = distinct_values(rng, static_cast<int>(entities.size()));
    const size_t gold_pos = answerable ? static_cast<size_t>(rng.below(n)) : 0;

    QAInstance inst;
    inst.id = instance_id(options.id_prefix, i);
    inst.question = "what is the access code of " + entities[0];
    std::vector<Passage> negatives;
    for (size_t e = 1; e < entities.size(); ++e) {
      negatives.push_back({entities[e], fact_sentence(entities[e], values[e]), false});
    }
    if (answerable) {
      inst.answer = values[0];
      inst.evidence = fact_sentence(entities[0], values[0]);
      Passage gold{entities[0], inst.evidence, true};
      negatives.insert(negatives.begin() + static_cast<std::ptrdiff_t>(gold_pos), gold);
    } else {
      inst.answer = std::string(kUnanswerable);
    }
    inst.passages = std::move(negatives);
    out.push_back(std::move(inst));
  }
  return out;
}

// --- JSONL --------------------------------------------------------------------

nlohmann::json to_json(const QAInstance& instance) {
  nlohmann::json passages = nlohmann::json::array();
  for (const auto& p : instance.passages) {
    passages.push_back({{"title", p.title}, {"text", p.text}, {"is_gold", p.is_gold}});
  }
  return {{"id", instance.id},
          {"question", instance.question},
          {"answer", instance.answer},
          {"evidence", instance.evidence},
          {"passages", std::move(passages)}};
}

namespace {

template <typename T>
T field(const nlohmann::json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) {
    throw ParseError(std::string("missing required field '") + name + "'");
  }
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(std::string("field '") + name + "' has the wrong type");
  }
}

}  // namespace

QAInstance instance_from_json(const nlohmann::json& j) {
  QAInstance inst;
  inst.id = field<std::string>(j, "id");
  inst.question = field<std::string>(j, "question");
  inst.answer = field<std::string>(j, "answer");
  inst.evidence = field<std::string>(j, "evidence");
  const auto passages = field<nlohmann::json>(j, "passages");
  if (!passages.is_array()) throw ParseError("field 'passages' has the wrong type");
  for (const auto& p : passages) {
    inst.passages.push_back(
        {field<std::string>(p, "title"), field<std::string>(p, "text"), field<bool>(p, "is_gold")});
  }
  return inst;
}

std::string to_jsonl(std::span<const QAInstance> instances) {
  std::string out;
  for (const auto& inst : instances) {
    out += to_json(inst).dump(-1, ' ', false);
    out += '\n';
  }
  return out;
}

std::vector<QAInstance> parse_jsonl(std::string_view text) {
  std::vector<QAInstance> out;
  size_t line_no = 0;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_jsonl(std::span<const QAInstance> instances, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string text = to_jsonl(instances);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<QAInstance> load_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_jsonl(ss.str());
}

}  // namespace kvfuse
