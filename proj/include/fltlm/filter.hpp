#pragma once

#include "fltlm/model.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace fltlm {

enum class ExtractionStrategy { kPairwise, kIndependent, kAccumulative, kNaive };

ExtractionStrategy parse_strategy(std::string_view name);
std::string to_string(ExtractionStrategy strategy);
/// Masking the first N layers must run under for the strategy's main pass.
FilterMasking required_masking(ExtractionStrategy strategy);

/// Linear scoring head plus the temperature and margin of the filter loss.
/// tau = exp(log_temperature) is frozen at 1; m = exp(log_margin) is learnable.
template <typename Scalar>
struct BasicFilterHead {
  BasicParameter<Scalar> weight;
  BasicParameter<Scalar> bias{"filter.bias", MatrixX<Scalar>::Zero(1, 1), ParamGroup::kHead, false};
  BasicParameter<Scalar> log_temperature{"filter.log_temperature", MatrixX<Scalar>::Zero(1, 1), ParamGroup::kHead,
                                         false};
  BasicParameter<Scalar> log_margin{"filter.log_margin", MatrixX<Scalar>::Zero(1, 1), ParamGroup::kHead, false};

  BasicFilterHead() { log_temperature.trainable = false; }

  std::vector<BasicParameter<Scalar>*> parameters() { return {&weight, &bias, &log_temperature, &log_margin}; }

  Scalar temperature() const { return std::exp(log_temperature.value()(0, 0)); }
  Scalar margin() const { return std::exp(log_margin.value()(0, 0)); }
  /// Fixes m to `value` and stops it from training.
  void fix_margin(Scalar value);

  template <typename Other>
  BasicFilterHead<Other> cast() const {
    BasicFilterHead<Other> out;
    out.weight = weight.template cast<Other>();
    out.bias = bias.template cast<Other>();
    out.log_temperature = log_temperature.template cast<Other>();
    out.log_margin = log_margin.template cast<Other>();
    return out;
  }
};

using FilterHead = BasicFilterHead<float>;

/// Weights ~ N(0, 0.02^2), zero bias, tau = m = 1.
FilterHead init_filter_head(int d_model, std::uint64_t seed);

/// Constant [L x L] mask hiding every other document (body and sentinel)
/// from rows inside a document. Rows outside documents see everything.
template <typename Scalar>
MatrixX<Scalar> independent_filter_mask(const SegmentedInput& input);

/// Per-document embeddings from layer-N states of the main pass.
/// Throws if `masking` does not match the strategy, or for kPairwise, whose
/// embeddings come from pairwise_embeddings().
template <typename Scalar>
Var<Scalar> extract_embeddings(Var<Scalar> hidden_n, const SegmentedInput& input, ExtractionStrategy strategy,
                               FilterMasking masking);

/// Runs the first N layers on each single-document input and takes the last
/// position of each.
template <typename Scalar>
Var<Scalar> pairwise_embeddings(Graph<Scalar>& graph, BasicModelParams<Scalar>& model, const QASample& sample);

/// s = E w + b, one row per document.
template <typename Scalar>
Var<Scalar> score(Var<Scalar> embeddings, BasicFilterHead<Scalar>& head);

/// Convenience: layer-N pass (or pairwise passes) plus scoring. When
/// `hidden_n` is given it receives the main pass's layer-N state for reuse.
template <typename Scalar>
Var<Scalar> filter_scores(Graph<Scalar>& graph, BasicModelParams<Scalar>& model, BasicFilterHead<Scalar>& head,
                          const QASample& sample, const SegmentedInput& input, ExtractionStrategy strategy,
                          std::optional<Var<Scalar>>* hidden_n = nullptr);

/// log(1 + sum_{i != p} exp((s_i - s_p) / tau)).
template <typename Scalar>
Var<Scalar> loss_infonce(Var<Scalar> scores, size_t positive, Var<Scalar> log_temperature);

/// log(1 + exp(-s_p / tau)) + log(1 + sum_{i != p} exp(s_i / tau)).
template <typename Scalar>
Var<Scalar> loss_infonce_star(Var<Scalar> scores, size_t positive, Var<Scalar> log_temperature);

/// log(1 + sum_pos exp(-(s_i - m) / tau)) + log(1 + sum_neg exp(s_i / tau)),
/// with tau = exp(log_temperature), m = exp(log_margin).
template <typename Scalar>
Var<Scalar> loss_flt(Var<Scalar> scores, std::span<const int> labels, Var<Scalar> log_temperature,
                     Var<Scalar> log_margin);

/// Plain evaluations on a throwaway graph.
double infonce_value(std::span<const double> scores, size_t positive, double tau = 1.0);
double infonce_star_value(std::span<const double> scores, size_t positive, double tau = 1.0);
double flt_value(std::span<const double> scores, std::span<const int> labels, double tau = 1.0, double margin = 1.0);

/// Indices (0-based) with s_i > 0.
template <typename Scalar>
std::vector<size_t> classify(std::span<const Scalar> scores) {
  std::vector<size_t> out;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > Scalar(0)) out.push_back(i);
  }
  return out;
}

}  // namespace fltlm
