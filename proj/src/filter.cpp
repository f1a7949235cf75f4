#include "fltlm/filter.hpp"

#include <limits>
#include <random>

namespace fltlm {

ExtractionStrategy parse_strategy(std::string_view name) {
  if (name == "pairwise") return ExtractionStrategy::kPairwise;
  if (name == "independent") return ExtractionStrategy::kIndependent;
  if (name == "accumulative") return ExtractionStrategy::kAccumulative;
  if (name == "naive") return ExtractionStrategy::kNaive;
  throw std::invalid_argument("unknown extraction strategy '" + std::string(name) +
                              "' (expected pairwise, independent, accumulative or naive)");
}

std::string to_string(ExtractionStrategy strategy) {
  switch (strategy) {
    case ExtractionStrategy::kPairwise: return "pairwise";
    case ExtractionStrategy::kIndependent: return "independent";
    case ExtractionStrategy::kAccumulative: return "accumulative";
    case ExtractionStrategy::kNaive: return "naive";
  }
  return "?";
}

FilterMasking required_masking(ExtractionStrategy strategy) {
  return strategy == ExtractionStrategy::kIndependent ? FilterMasking::kIndependent : FilterMasking::kNone;
}

template <typename Scalar>
void BasicFilterHead<Scalar>::fix_margin(Scalar value) {
  if (!(value > Scalar(0))) throw std::invalid_argument("margin must be positive");
  log_margin.value()(0, 0) = std::log(value);
  log_margin.trainable = false;
}

template struct BasicFilterHead<float>;
template struct BasicFilterHead<double>;

FilterHead init_filter_head(int d_model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  FilterHead head;
  Matrix w(d_model, 1);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(dist(rng));
  head.weight = Parameter("filter.weight", std::move(w), ParamGroup::kHead, false);
  return head;
}

template <typename Scalar>
MatrixX<Scalar> independent_filter_mask(const SegmentedInput& input) {
  const Index len = input.length();
  MatrixX<Scalar> mask = MatrixX<Scalar>::Zero(len, len);
  constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();
  const size_t n = input.document_count();
  for (size_t i = 0; i < n; ++i) {
    const Span rows = input.masked_columns(i);
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Span cols = input.masked_columns(j);
      mask.block(rows.begin, cols.begin, rows.length(), cols.length()).setConstant(kNegInf);
    }
  }
  return mask;
}

template <typename Scalar>
Var<Scalar> extract_embeddings(Var<Scalar> hidden_n, const SegmentedInput& input, ExtractionStrategy strategy,
                               FilterMasking masking) {
  if (strategy == ExtractionStrategy::kPairwise) {
    throw std::invalid_argument("pairwise embeddings need separate single-document passes");
  }
  if (masking != required_masking(strategy)) {
    throw std::invalid_argument("hidden states were produced with the wrong masking for the " + to_string(strategy) +
                                " strategy");
  }
  if (hidden_n.rows() != input.length()) {
    throw ShapeError("extract_embeddings: hidden states have " + std::to_string(hidden_n.rows()) + " rows, input has " +
                     std::to_string(input.length()) + " tokens");
  }
  const auto& p = input.sentinel_positions;
  Var<Scalar> at_sentinels = select_rows(hidden_n, std::span<const Index>(p));
  if (strategy != ExtractionStrategy::kAccumulative) return at_sentinels;
  std::vector<Index> previous{input.reference_position};
  previous.insert(previous.end(), p.begin(), p.end() - 1);
  return sub(at_sentinels, select_rows(hidden_n, std::span<const Index>(previous)));
}

template <typename Scalar>
Var<Scalar> pairwise_embeddings(Graph<Scalar>& graph, BasicModelParams<Scalar>& model, const QASample& sample) {
  std::vector<Var<Scalar>> rows;
  for (size_t i = 0; i < sample.documents.size(); ++i) {
    const SegmentedInput pair = build_pair_input(sample, i, model.config.max_context);
    ForwardRequest<Scalar> req;
    req.tokens = pair.tokens;
    req.stop_layer = model.config.filter_layers;
    auto out = forward(graph, model, req);
    const Index last = pair.length() - 1;
    rows.push_back(select_rows(out.hidden.back(), std::span<const Index>(&last, 1)));
  }
  return concat_rows(std::span<const Var<Scalar>>(rows));
}

template <typename Scalar>
Var<Scalar> score(Var<Scalar> embeddings, BasicFilterHead<Scalar>& head) {
  Graph<Scalar>& g = embeddings.graph();
  if (embeddings.cols() != head.weight.value().rows()) {
    throw ShapeError("score: embeddings " + shape_string(embeddings.rows(), embeddings.cols()) +
                     " do not match head " + shape_string(head.weight.value().rows(), 1));
  }
  return add_scalar(matmul(embeddings, g.parameter(head.weight)), g.parameter(head.bias));
}

template <typename Scalar>
Var<Scalar> filter_scores(Graph<Scalar>& graph, BasicModelParams<Scalar>& model, BasicFilterHead<Scalar>& head,
                          const QASample& sample, const SegmentedInput& input, ExtractionStrategy strategy,
                          std::optional<Var<Scalar>>* hidden_n) {
  const MatrixX<Scalar> mask = strategy == ExtractionStrategy::kIndependent ? independent_filter_mask<Scalar>(input)
                                                                              : MatrixX<Scalar>();
  ForwardRequest<Scalar> req;
  req.tokens = input.tokens;
  req.stop_layer = model.config.filter_layers;
  if (strategy == ExtractionStrategy::kIndependent) req.filter_mask = &mask;
  Var<Scalar> embeddings;
  if (strategy == ExtractionStrategy::kPairwise) {
    if (hidden_n != nullptr) *hidden_n = forward(graph, model, req).hidden.back();
    embeddings = pairwise_embeddings(graph, model, sample);
  } else {
    Var<Scalar> h = forward(graph, model, req).hidden.back();
    if (hidden_n != nullptr) *hidden_n = h;
    embeddings = extract_embeddings(h, input, strategy, required_masking(strategy));
  }
  return score(embeddings, head);
}

namespace {

template <typename Scalar>
Var<Scalar> inverse_temperature(Var<Scalar> log_temperature) {
  return exp(scale(log_temperature, Scalar(-1)));
}

template <typename Scalar>
Var<Scalar> rows_except(Var<Scalar> scores, size_t skip) {
  std::vector<Index> idx;
  for (Index i = 0; i < scores.rows(); ++i) {
    if (static_cast<size_t>(i) != skip) idx.push_back(i);
  }
  return select_rows(scores, std::span<const Index>(idx));
}

template <typename Scalar>
void check_column(Var<Scalar> scores, const char* who) {
  if (scores.cols() != 1) throw ShapeError(std::string(who) + ": scores must be a column");
}

}  // namespace

template <typename Scalar>
Var<Scalar> loss_infonce(Var<Scalar> scores, size_t positive, Var<Scalar> log_temperature) {
  check_column(scores, "loss_infonce");
  if (positive >= static_cast<size_t>(scores.rows())) throw std::out_of_range("loss_infonce: positive index");
  const Index p = static_cast<Index>(positive);
  Var<Scalar> sp = select_rows(scores, std::span<const Index>(&p, 1));
  Var<Scalar> diffs = add_scalar(rows_except(scores, positive), scale(sp, Scalar(-1)));
  return log1p_sum_exp(mul_scalar(diffs, inverse_temperature(log_temperature)));
}

template <typename Scalar>
Var<Scalar> loss_infonce_star(Var<Scalar> scores, size_t positive, Var<Scalar> log_temperature) {
  check_column(scores, "loss_infonce_star");
  if (positive >= static_cast<size_t>(scores.rows())) throw std::out_of_range("loss_infonce_star: positive index");
  const Index p = static_cast<Index>(positive);
  Var<Scalar> inv_tau = inverse_temperature(log_temperature);
  Var<Scalar> sp = select_rows(scores, std::span<const Index>(&p, 1));
  Var<Scalar> pos_term = log1p_sum_exp(mul_scalar(scale(sp, Scalar(-1)), inv_tau));
  Var<Scalar> neg_term = log1p_sum_exp(mul_scalar(rows_except(scores, positive), inv_tau));
  return add(pos_term, neg_term);
}

template <typename Scalar>
Var<Scalar> loss_flt(Var<Scalar> scores, std::span<const int> labels, Var<Scalar> log_temperature,
                     Var<Scalar> log_margin) {
  check_column(scores, "loss_flt");
  if (labels.size() != static_cast<size_t>(scores.rows())) {
    throw std::invalid_argument("loss_flt: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(scores.rows()) + " scores");
  }
  std::vector<Index> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("loss_flt: labels must be 0 or 1");
    (labels[i] == 1 ? pos : neg).push_back(static_cast<Index>(i));
  }
  Var<Scalar> inv_tau = inverse_temperature(log_temperature);
  Var<Scalar> m = exp(log_margin);
  Var<Scalar> pos_arg = mul_scalar(add_scalar(scale(select_rows(scores, std::span<const Index>(pos)), Scalar(-1)), m), inv_tau);
  Var<Scalar> neg_arg = mul_scalar(select_rows(scores, std::span<const Index>(neg)), inv_tau);
  return add(log1p_sum_exp(pos_arg), log1p_sum_exp(neg_arg));
}

namespace {

struct PlainLossGraph {
  Graph<double> graph;
  Var<double> scores, log_tau, log_margin;

  PlainLossGraph(std::span<const double> s, double tau, double margin) {
    if (!(tau > 0.0) || !(margin > 0.0)) throw std::invalid_argument("temperature and margin must be positive");
    MatrixX<double> col(static_cast<Index>(s.size()), 1);
    for (size_t i = 0; i < s.size(); ++i) col(static_cast<Index>(i), 0) = s[i];
    scores = graph.constant(std::move(col));
    log_tau = graph.constant(MatrixX<double>::Constant(1, 1, std::log(tau)));
    log_margin = graph.constant(MatrixX<double>::Constant(1, 1, std::log(margin)));
  }
};

}  // namespace

double infonce_value(std::span<const double> scores, size_t positive, double tau) {
  PlainLossGraph g(scores, tau, 1.0);
  return loss_infonce(g.scores, positive, g.log_tau).item();
}

double infonce_star_value(std::span<const double> scores, size_t positive, double tau) {
  PlainLossGraph g(scores, tau, 1.0);
  return loss_infonce_star(g.scores, positive, g.log_tau).item();
}

double flt_value(std::span<const double> scores, std::span<const int> labels, double tau, double margin) {
  PlainLossGraph g(scores, tau, margin);
  return loss_flt(g.scores, labels, g.log_tau, g.log_margin).item();
}

#define FLTLM_INSTANTIATE(S)                                                                                        \
  template MatrixX<S> independent_filter_mask<S>(const SegmentedInput&);                                           \
  template Var<S> extract_embeddings(Var<S>, const SegmentedInput&, ExtractionStrategy, FilterMasking);            \
  template Var<S> pairwise_embeddings(Graph<S>&, BasicModelParams<S>&, const QASample&);                          \
  template Var<S> score(Var<S>, BasicFilterHead<S>&);                                                              \
  template Var<S> filter_scores(Graph<S>&, BasicModelParams<S>&, BasicFilterHead<S>&, const QASample&,            \
                                const SegmentedInput&, ExtractionStrategy, std::optional<Var<S>>*);                \
  template Var<S> loss_infonce(Var<S>, size_t, Var<S>);                                                            \
  template Var<S> loss_infonce_star(Var<S>, size_t, Var<S>);                                                       \
  template Var<S> loss_flt(Var<S>, std::span<const int>, Var<S>, Var<S>);

FLTLM_INSTANTIATE(float)
FLTLM_INSTANTIATE(double)

#undef FLTLM_INSTANTIATE

}  // namespace fltlm
