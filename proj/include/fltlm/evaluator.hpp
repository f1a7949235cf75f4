#pragma once

#include "fltlm/datagen.hpp"
#include "fltlm/trainer.hpp"

#include <random>
#include <optional>
#include <string>
#include <vector>

namespace fltlm {

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);
/// Multiset token F1 after normalisation; empty vs empty is 1, one empty side is 0.
double qa_f1(std::string_view prediction, std::string_view gold);

struct FilterMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  size_t samples = 0;
};

/// Per-sample set precision / recall / F1, macro-averaged. An empty
/// prediction has precision 0 (and F1 0) when gold is non-empty.
FilterMetrics filter_metrics(std::span<const std::vector<size_t>> predicted, std::span<const std::vector<size_t>> gold);

/// Mean fraction of each gold set inside the top-k by score, for k = 1..k_max.
/// Ties go to the lower document index.
std::vector<double> recall_curve(std::span<const std::vector<double>> scores,
                                 std::span<const std::vector<size_t>> gold, size_t k_max);
std::vector<double> oracle_scores(const QASample& sample);
std::vector<double> random_scores(const QASample& sample, std::mt19937_64& rng);
std::vector<size_t> gold_set(const QASample& sample);

/// How a model is used at evaluation time.
struct ModelEntry {
  std::string name;
  Regime regime = Regime::kSft;
  FltlmParams* params = nullptr;  // nullptr marks a missing checkpoint
  std::optional<ExtractionStrategy> strategy;  // overrides EvalOptions::strategy
};

struct EvalOptions {
  ExtractionStrategy strategy = ExtractionStrategy::kNaive;
  int max_new_tokens = 1;
};

struct Prediction {
  std::string answer;
  double f1 = 0.0;
  bool truncated = false;
  std::vector<double> scores;  // empty for models without a filter
};

/// Reader regimes apply the soft mask only when trained with it (fltlm,
/// filter-plus-lm); filter scores are produced for every filter regime.
Prediction predict(const ModelEntry& model, const QASample& sample, const EvalOptions& opts);

/// Scores from the first N layers and the scoring head.
std::vector<double> document_scores(FltlmParams& params, const QASample& sample, ExtractionStrategy strategy);

/// Filter with `filter`, keep documents with s_i > 0 (the top-scoring one if
/// none pass), then answer with `reader` on the reduced input.
Prediction filter_then_read(FltlmParams& filter, FltlmParams& reader, const QASample& sample, const EvalOptions& opts);

enum class Ordering { kOriginal, kReordered };
enum class DocSet { kPosNeg, kPos, kNeg };

struct Condition {
  Ordering ordering = Ordering::kOriginal;
  DocSet docs = DocSet::kPosNeg;
  std::string name() const;
  friend bool operator==(const Condition&, const Condition&) = default;
};

/// "all", or a comma list of names such as original/pos+neg,reordered/pos.
std::vector<Condition> parse_conditions(std::string_view text);
std::vector<Condition> all_conditions();
QASample apply_condition(const QASample& sample, const Condition& condition);

struct ReportRow {
  std::string model;
  std::string regime;
  std::string condition;
  double qa_f1 = 0.0;
  FilterMetrics filter;  // samples == 0 when not applicable
  size_t samples = 0;
  bool missing = false;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;

  const ReportRow* find(std::string_view model, std::string_view condition) const;
  /// qa_f1(reordered/pos+neg) - qa_f1(original/pos+neg); NaN if either is absent.
  double reorder_delta(std::string_view model) const;
  std::string csv(std::span<const std::string> header) const;
  std::string summary() const;
};

EvalReport run_matrix(std::span<const ModelEntry> models, std::span<const QASample> eval,
                      std::span<const Condition> conditions, const EvalOptions& opts);

/// Appends a "filter-then-read" row per condition.
void add_two_stage_rows(EvalReport& report, FltlmParams* filter, FltlmParams* reader, std::span<const QASample> eval,
                        std::span<const Condition> conditions, const EvalOptions& opts);

struct AttentionSummary {
  std::string model;
  double positive = 0.0;
  double negative = 0.0;
  double ratio() const { return negative > 0.0 ? positive / negative : 0.0; }
};

/// Mean positive/negative document attention share of the first answer position.
AttentionSummary attention_summary(const ModelEntry& model, std::span<const QASample> eval, const EvalOptions& opts);

struct RecallCurves {
  std::vector<double> filter, oracle, random;
};

RecallCurves recall_curves(FltlmParams& params, std::span<const QASample> eval, const EvalOptions& opts,
                           std::uint64_t seed);
std::string recall_csv(const RecallCurves& curves, std::span<const std::string> header);

}  // namespace fltlm
