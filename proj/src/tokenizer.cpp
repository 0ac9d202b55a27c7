#include "kvfuse/data.hpp"
#include "kvfuse/errors.hpp"

namespace kvfuse {

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string_view Tokenizer::special_text(int32_t id) {
  switch (id) {
    case kBos:
      return "<s>";
    case kEos:
      return "</s>";
    case kQuestionAnswering:
      return "<|question_answering|>";
    case kResult:
      return "[RESULT]";
    case kEnd:
      return "[END]";
    default:
      throw VocabularyError("not a special token id: " + std::to_string(id));
  }
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (is_special(id)) {
      out += special_text(id);
    } else {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  return out;
}

}  // namespace kvfuse
