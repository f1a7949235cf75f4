#pragma once

#include "fltlm/input_builder.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace fltlm {

enum class DistractorStyle { kRandom, kNearMiss };

DistractorStyle parse_distractor_style(std::string_view name);
std::string to_string(DistractorStyle style);

/// Synthetic multi-hop corpus. Facts are "subject relation object" word
/// triples; a k-hop question asks for the end of a relation chain.
struct GenConfig {
  int n_docs = 10;
  int hops = 1;
  int facts_per_doc = 6;
  /// Entities drawn from the vocabulary; 0 uses all of them.
  int entity_count = 0;
  int relation_count = Vocabulary::kRelations;
  int answer_length = 1;
  DistractorStyle style = DistractorStyle::kNearMiss;
  std::uint64_t seed = 1;
  size_t train_size = 20000;
  size_t eval_size = 1000;

  void validate() const;
  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

enum class Split { kTrain, kEval };

/// Entities that may start a question in the given split; the two sets are disjoint.
std::vector<int> start_entities(const GenConfig& cfg, Split split);

/// One sample: k chain documents (relevant) plus n_docs - k distractors,
/// uniformly shuffled. Throws if the entity pool cannot supply the sample.
QASample generate_sample(const GenConfig& cfg, std::mt19937_64& rng, std::span<const int> starts, std::string id);

struct Corpus {
  std::vector<QASample> train;
  std::vector<QASample> eval;
};

/// Each sample uses its own seed derived from (cfg.seed, split, index).
Corpus generate_corpus(const GenConfig& cfg);
std::vector<QASample> generate_split(const GenConfig& cfg, Split split, size_t count);

struct AblationInputs {
  QASample pos_and_neg;
  QASample pos_only;
  QASample neg_only;
};

/// Requires at least one relevant and one irrelevant document.
AblationInputs make_ablation_inputs(const QASample& sample);

struct CorpusStats {
  size_t samples = 0;
  double mean_tokens = 0.0;
  Index max_tokens = 0;
  double mean_relevant = 0.0;
  size_t min_relevant = 0;
  size_t max_relevant = 0;
};

CorpusStats corpus_stats(std::span<const QASample> samples, Index max_context);

}  // namespace fltlm
