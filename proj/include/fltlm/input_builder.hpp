#pragma once

#include "fltlm/tensor.hpp"
#include "fltlm/vocab.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fltlm {

struct Document {
  std::string text;
  bool relevant = false;

  friend bool operator==(const Document&, const Document&) = default;
};

struct QASample {
  std::string id;
  std::string question;
  std::vector<Document> documents;
  std::string answer;

  std::vector<int> labels() const;
  size_t relevant_count() const;
  friend bool operator==(const QASample&, const QASample&) = default;
};

/// Half-open token range [begin, end).
struct Span {
  Index begin = 0;
  Index end = 0;
  Index length() const { return end - begin; }
  bool contains(Index i) const { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Whether the soft mask hides a document's sentinel along with its body.
/// Document content occupies [l_i, p_i); the masked columns are
/// [l_i, p_i + 1) when this is set.
inline constexpr bool kMaskCoversSentinel = true;

enum class BuildMode { kTrain, kInfer };

struct SegmentedInput {
  std::vector<int> tokens;
  std::vector<Span> doc_spans;  // content spans, u_i == p_i
  std::vector<Index> sentinel_positions;
  std::vector<int> relevance_labels;
  std::vector<bool> answer_mask;
  Index answer_start = 0;
  /// Last position before the first document; the accumulative strategy
  /// subtracts its hidden state from the first sentinel's.
  Index reference_position = 0;

  Index length() const { return static_cast<Index>(tokens.size()); }
  size_t document_count() const { return doc_spans.size(); }
  /// Columns covered by document i's mask intensity.
  Span masked_columns(size_t i) const;
  /// Next-token targets aligned with logits rows, plus the row mask.
  std::vector<int> next_token_targets() const;
  std::vector<bool> loss_rows() const;
};

struct ContextOverflow : std::length_error {
  ContextOverflow(Index measured, Index limit)
      : std::length_error("input has " + std::to_string(measured) + " tokens, limit is " + std::to_string(limit)),
        measured_length(measured) {}
  Index measured_length;
};

/// prompt, question, (doc_i, </doc_i>)..., prompt, question, <ans>, answer.
/// In infer mode the answer region is empty.
SegmentedInput build_input(const QASample& sample, BuildMode mode, Index max_context,
                           const Vocabulary& vocab = Vocabulary::standard());

/// Single-document reranker layout: prompt, question, doc_i, </doc_1>.
SegmentedInput build_pair_input(const QASample& sample, size_t doc, Index max_context,
                                const Vocabulary& vocab = Vocabulary::standard());

/// Moves the first ceil(k/2) relevant documents to the front and the rest to
/// the back, keeping relative order everywhere.
QASample reorder_sample(const QASample& sample);

/// Returns the sample with its documents permuted; `order[j]` is the source index of new slot j.
QASample permute_documents(const QASample& sample, std::span<const size_t> order);

// Dataset file: one JSON object per line,
// {"id":..., "question":..., "documents":[{"text":..., "label":0|1}], "answer":...}
std::string sample_to_json_line(const QASample& sample);
QASample sample_from_json_line(std::string_view line);
void write_dataset(const std::filesystem::path& path, std::span<const QASample> samples);
std::vector<QASample> read_dataset(const std::filesystem::path& path);

}  // namespace fltlm
