#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fltlm {

struct OutOfVocabulary : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Closed word-level vocabulary shared by the generator, the builder and the model.
///
/// Layout: <pad>, <ans>, sixteen sentinels </doc_1>..</doc_16>, the prompt
/// words, relation words r00..r31, then entity words e000.. up to kSize.
class Vocabulary {
 public:
  static constexpr int kSize = 512;
  static constexpr int kMaxDocuments = 16;
  static constexpr int kRelations = 32;

  static const Vocabulary& standard();

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  bool contains(std::string_view word) const { return index_.contains(std::string(word)); }

  int pad() const { return 0; }
  /// Marks the start of the answer region; generation stops when emitted.
  int answer_delimiter() const { return 1; }
  /// Sentinel for 1-based document index.
  int sentinel(int doc_index) const;
  bool is_sentinel(int id) const { return id >= 2 && id < 2 + kMaxDocuments; }
  bool is_reserved(int id) const { return id < 2 + kMaxDocuments; }

  std::span<const int> relations() const { return relations_; }
  std::span<const int> entities() const { return entities_; }

  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> relations_;
  std::vector<int> entities_;
};

/// Fixed instruction shown before and after the documents.
inline constexpr std::string_view kPromptText = "read the documents then answer";
inline constexpr std::string_view kQuestionMarker = "question";

}  // namespace fltlm
