#include "fltlm/vocab.hpp"

#include <cstdio>

namespace fltlm {

namespace {

// Words used by the prompt template and question phrasing.
constexpr std::string_view kFunctionWords[] = {"read", "the", "documents", "then", "answer", "question", "what", "of"};

}  // namespace

Vocabulary::Vocabulary() {
  auto push = [this](std::string w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(std::move(w));
  };
  push("<pad>");
  push("<ans>");
  for (int i = 1; i <= kMaxDocuments; ++i) push("</doc_" + std::to_string(i) + ">");
  for (auto w : kFunctionWords) push(std::string(w));
  char buf[16];
  for (int r = 0; r < kRelations; ++r) {
    std::snprintf(buf, sizeof buf, "r%02d", r);
    relations_.push_back(static_cast<int>(words_.size()));
    push(buf);
  }
  for (int e = 0; static_cast<int>(words_.size()) < kSize; ++e) {
    std::snprintf(buf, sizeof buf, "e%03d", e);
    entities_.push_back(static_cast<int>(words_.size()));
    push(buf);
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw OutOfVocabulary("out-of-vocabulary word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return words_[static_cast<size_t>(id)];
}

int Vocabulary::sentinel(int doc_index) const {
  if (doc_index < 1 || doc_index > kMaxDocuments) {
    throw std::out_of_range("document index " + std::to_string(doc_index) + " has no sentinel");
  }
  return 1 + doc_index;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> ids;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    ids.push_back(id(text.substr(pos, end - pos)));
    pos = end + 1;
  }
  return ids;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += word(ids[i]);
  }
  return out;
}

}  // namespace fltlm
