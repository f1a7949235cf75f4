#include "fltlm/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace fltlm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::ispunct(u)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(u)));
  }
  std::string out;
  for (const auto& w : split_words(cleaned)) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double qa_f1(std::string_view prediction, std::string_view gold) {
  const auto pred = split_words(normalize_answer(prediction));
  const auto ref = split_words(normalize_answer(gold));
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : ref) ++counts[w];
  int overlap = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

FilterMetrics filter_metrics(std::span<const std::vector<size_t>> predicted, std::span<const std::vector<size_t>> gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("filter_metrics: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(gold.size()) + " gold sets");
  }
  FilterMetrics m;
  m.samples = gold.size();
  if (gold.empty()) return m;
  for (size_t s = 0; s < gold.size(); ++s) {
    const auto& p = predicted[s];
    const auto& g = gold[s];
    size_t hit = 0;
    for (size_t i : p) hit += std::count(g.begin(), g.end(), i) > 0 ? 1 : 0;
    double prec, rec;
    if (p.empty() && g.empty()) {
      prec = rec = 1.0;
    } else {
      prec = p.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(p.size());
      rec = g.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(g.size());
    }
    m.precision += prec;
    m.recall += rec;
    m.f1 += prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  const double n = static_cast<double>(gold.size());
  m.precision /= n;
  m.recall /= n;
  m.f1 /= n;
  return m;
}

std::vector<double> recall_curve(std::span<const std::vector<double>> scores,
                                 std::span<const std::vector<size_t>> gold, size_t k_max) {
  if (scores.size() != gold.size()) throw std::invalid_argument("recall_curve: sample counts differ");
  std::vector<double> curve(k_max, 0.0);
  size_t counted = 0;
  for (size_t s = 0; s < scores.size(); ++s) {
    if (gold[s].empty()) continue;
    const auto& sc = scores[s];
    if (k_max > sc.size()) throw std::invalid_argument("recall_curve: k exceeds the document count");
    std::vector<size_t> order(sc.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&sc](size_t a, size_t b) { return sc[a] > sc[b]; });
    size_t hits = 0;
    for (size_t k = 0; k < k_max; ++k) {
      hits += std::count(gold[s].begin(), gold[s].end(), order[k]) > 0 ? 1 : 0;
      curve[k] += static_cast<double>(hits) / static_cast<double>(gold[s].size());
    }
    ++counted;
  }
  if (counted > 0) {
    for (auto& v : curve) v /= static_cast<double>(counted);
  }
  return curve;
}

std::vector<double> oracle_scores(const QASample& sample) {
  std::vector<double> out;
  for (const auto& d : sample.documents) out.push_back(d.relevant ? 1.0 : 0.0);
  return out;
}

std::vector<double> random_scores(const QASample& sample, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> out;
  for (size_t i = 0; i < sample.documents.size(); ++i) out.push_back(dist(rng));
  return out;
}

std::vector<size_t> gold_set(const QASample& sample) {
  std::vector<size_t> out;
  for (size_t i = 0; i < sample.documents.size(); ++i) {
    if (sample.documents[i].relevant) out.push_back(i);
  }
  return out;
}

std::vector<double> document_scores(FltlmParams& params, const QASample& sample, ExtractionStrategy strategy) {
  const SegmentedInput input = build_input(sample, BuildMode::kInfer, params.model.config.max_context);
  Graph<float> graph;
  graph.set_grad_enabled(false);
  const auto scores = filter_scores(graph, params.model, params.head, sample, input, strategy);
  std::vector<double> out;
  for (Index i = 0; i < scores.rows(); ++i) out.push_back(scores.value()(i, 0));
  return out;
}

namespace {

bool reads_with_soft_mask(Regime r) { return r == Regime::kFltlm || r == Regime::kFilterPlusLm; }

/// Decoding that re-runs the taped forward each step so that the first N
/// layers can keep the independent-document mask.
Generation masked_generate(ModelParams& model, const SegmentedInput& input, const DocumentBias* bias,
                           int max_new_tokens) {
  const Matrix prompt_mask = independent_filter_mask<float>(input);
  Generation gen;
  if (max_new_tokens <= 0) return gen;
  std::vector<int> seq = input.tokens;
  const int delimiter = Vocabulary::standard().answer_delimiter();
  while (true) {
    const Index len = static_cast<Index>(seq.size());
    Matrix mask = Matrix::Zero(len, len);
    mask.topLeftCorner(prompt_mask.rows(), prompt_mask.cols()) = prompt_mask;
    Graph<float> graph;
    graph.set_grad_enabled(false);
    ForwardRequest<float> req;
    req.tokens = seq;
    req.filter_mask = &mask;
    if (bias != nullptr) req.reader_bias = graph.constant(bias->dense(len));
    const auto out = forward(graph, model, req);
    Index best = 0;
    out.logits->value().row(len - 1).maxCoeff(&best);
    const int t = static_cast<int>(best);
    if (t == delimiter) break;
    gen.tokens.push_back(t);
    if (static_cast<int>(gen.tokens.size()) >= max_new_tokens) break;
    if (len >= model.config.max_context) {
      gen.truncated = true;
      break;
    }
    seq.push_back(t);
  }
  return gen;
}

Prediction read(FltlmParams& params, const QASample& sample, const std::vector<double>* scores, bool soft_mask,
                const EvalOptions& opts) {
  const SegmentedInput input = build_input(sample, BuildMode::kInfer, params.model.config.max_context);
  DocumentBias bias;
  if (soft_mask) {
    const float w = params.mask.w.value()(0, 0);
    const float b = params.mask.b.value()(0, 0);
    std::vector<float> levels;
    for (double s : *scores) levels.push_back(intensity(static_cast<float>(s), w, b));
    bias = DocumentBias::from_input(input, levels);
  }
  const DocumentBias* bias_ptr = soft_mask ? &bias : nullptr;
  const Generation gen = opts.strategy == ExtractionStrategy::kIndependent && scores != nullptr
                             ? masked_generate(params.model, input, bias_ptr, opts.max_new_tokens)
                             : generate(params.model, input, bias_ptr, opts.max_new_tokens);
  Prediction p;
  p.answer = Vocabulary::standard().detokenize(gen.tokens);
  p.f1 = qa_f1(p.answer, sample.answer);
  p.truncated = gen.truncated;
  return p;
}

}  // namespace

Prediction predict(const ModelEntry& model, const QASample& sample, const EvalOptions& options) {
  if (model.params == nullptr) throw std::invalid_argument("predict: model '" + model.name + "' has no parameters");
  EvalOptions opts = options;
  if (model.strategy) opts.strategy = *model.strategy;
  std::vector<double> scores;
  if (uses_filter(model.regime)) scores = document_scores(*model.params, sample, opts.strategy);
  Prediction p = read(*model.params, sample, uses_filter(model.regime) ? &scores : nullptr,
                      reads_with_soft_mask(model.regime), opts);
  p.scores = std::move(scores);
  return p;
}

Prediction filter_then_read(FltlmParams& filter, FltlmParams& reader, const QASample& sample, const EvalOptions& opts) {
  auto scores = document_scores(filter, sample, opts.strategy);
  auto keep = classify(std::span<const double>(scores));
  if (keep.empty() && !scores.empty()) {
    keep.push_back(static_cast<size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
  }
  QASample reduced = sample;
  reduced.documents.clear();
  for (size_t i : keep) reduced.documents.push_back(sample.documents[i]);
  EvalOptions reader_opts = opts;
  reader_opts.strategy = ExtractionStrategy::kNaive;
  Prediction p = read(reader, reduced, nullptr, false, reader_opts);
  p.scores = std::move(scores);
  return p;
}

std::string Condition::name() const {
  std::string out = ordering == Ordering::kOriginal ? "original/" : "reordered/";
  switch (docs) {
    case DocSet::kPosNeg: return out + "pos+neg";
    case DocSet::kPos: return out + "pos";
    case DocSet::kNeg: return out + "neg";
  }
  return out;
}

std::vector<Condition> all_conditions() {
  std::vector<Condition> out;
  for (auto o : {Ordering::kOriginal, Ordering::kReordered}) {
    for (auto d : {DocSet::kPosNeg, DocSet::kPos, DocSet::kNeg}) out.push_back({o, d});
  }
  return out;
}

std::vector<Condition> parse_conditions(std::string_view text) {
  if (text == "all") return all_conditions();
  std::vector<Condition> out;
  const auto known = all_conditions();
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t comma = std::min(text.find(',', pos), text.size());
    const std::string_view item = text.substr(pos, comma - pos);
    auto it = std::find_if(known.begin(), known.end(), [&](const Condition& c) { return c.name() == item; });
    if (it == known.end()) {
      throw std::invalid_argument("unknown condition '" + std::string(item) +
                                  "' (expected all or {original,reordered}/{pos+neg,pos,neg})");
    }
    out.push_back(*it);
    pos = comma + 1;
  }
  return out;
}

QASample apply_condition(const QASample& sample, const Condition& condition) {
  QASample s = condition.ordering == Ordering::kReordered ? reorder_sample(sample) : sample;
  if (condition.docs == DocSet::kPosNeg) return s;
  auto parts = make_ablation_inputs(s);
  return condition.docs == DocSet::kPos ? parts.pos_only : parts.neg_only;
}

const ReportRow* EvalReport::find(std::string_view model, std::string_view condition) const {
  for (const auto& r : rows) {
    if (r.model == model && r.condition == condition && !r.missing) return &r;
  }
  return nullptr;
}

double EvalReport::reorder_delta(std::string_view model) const {
  const auto* a = find(model, "reordered/pos+neg");
  const auto* b = find(model, "original/pos+neg");
  return a != nullptr && b != nullptr ? a->qa_f1 - b->qa_f1 : kNaN;
}

std::string EvalReport::csv(std::span<const std::string> header) const {
  std::ostringstream os;
  for (const auto& h : header) os << "# " << h << '\n';
  for (const auto& n : notes) os << "# note: " << n << '\n';
  os << "model,regime,condition,samples,qa_f1,filter_precision,filter_recall,filter_f1,missing\n";
  for (const auto& r : rows) {
    const bool f = r.filter.samples > 0;
    os << r.model << ',' << r.regime << ',' << r.condition << ',' << r.samples << ',' << fmt(r.qa_f1) << ','
       << (f ? fmt(r.filter.precision) : "") << ',' << (f ? fmt(r.filter.recall) : "") << ','
       << (f ? fmt(r.filter.f1) : "") << ',' << (r.missing ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof line, "%-20s %-20s %8s %8s %8s %8s\n", "model", "condition", "qa_f1", "flt_P", "flt_R",
                "flt_F1");
  os << line;
  for (const auto& r : rows) {
    if (r.missing) {
      std::snprintf(line, sizeof line, "%-20s %-20s %8s\n", r.model.c_str(), r.condition.c_str(), "missing");
    } else if (r.filter.samples > 0) {
      std::snprintf(line, sizeof line, "%-20s %-20s %8.2f %8.2f %8.2f %8.2f\n", r.model.c_str(), r.condition.c_str(),
                    100 * r.qa_f1, 100 * r.filter.precision, 100 * r.filter.recall, 100 * r.filter.f1);
    } else {
      std::snprintf(line, sizeof line, "%-20s %-20s %8.2f %8s %8s %8s\n", r.model.c_str(), r.condition.c_str(),
                    100 * r.qa_f1, "-", "-", "-");
    }
    os << line;
  }
  for (const auto& n : notes) os << "note: " << n << '\n';
  return os.str();
}

EvalReport run_matrix(std::span<const ModelEntry> models, std::span<const QASample> eval,
                      std::span<const Condition> conditions, const EvalOptions& opts) {
  EvalReport report;
  for (const auto& m : models) {
    if (m.params == nullptr) report.notes.push_back("checkpoint for '" + m.name + "' missing; rows skipped");
    for (const auto& c : conditions) {
      ReportRow row;
      row.model = m.name;
      row.regime = to_string(m.regime);
      row.condition = c.name();
      if (m.params == nullptr) {
        row.missing = true;
        report.rows.push_back(row);
        continue;
      }
      std::vector<std::vector<size_t>> predicted, gold;
      double total = 0.0;
      for (const auto& sample : eval) {
        const QASample s = apply_condition(sample, c);
        const Prediction p = predict(m, s, opts);
        total += p.f1;
        if (!p.scores.empty() && c.docs != DocSet::kNeg) {
          predicted.push_back(classify(std::span<const double>(p.scores)));
          gold.push_back(gold_set(s));
        }
      }
      row.samples = eval.size();
      row.qa_f1 = eval.empty() ? kNaN : total / static_cast<double>(eval.size());
      if (m.regime == Regime::kFilterOnly) row.qa_f1 = kNaN;
      if (!gold.empty()) row.filter = filter_metrics(predicted, gold);
      report.rows.push_back(row);
    }
  }
  return report;
}

void add_two_stage_rows(EvalReport& report, FltlmParams* filter, FltlmParams* reader, std::span<const QASample> eval,
                        std::span<const Condition> conditions, const EvalOptions& opts) {
  const std::string name = "filter-then-read";
  if (filter == nullptr || reader == nullptr) report.notes.push_back("filter-then-read needs filter and reader checkpoints");
  for (const auto& c : conditions) {
    ReportRow row;
    row.model = name;
    row.regime = "two-stage";
    row.condition = c.name();
    if (filter == nullptr || reader == nullptr) {
      row.missing = true;
      report.rows.push_back(row);
      continue;
    }
    std::vector<std::vector<size_t>> predicted, gold;
    double total = 0.0;
    for (const auto& sample : eval) {
      const QASample s = apply_condition(sample, c);
      const Prediction p = filter_then_read(*filter, *reader, s, opts);
      total += p.f1;
      if (c.docs != DocSet::kNeg) {
        predicted.push_back(classify(std::span<const double>(p.scores)));
        gold.push_back(gold_set(s));
      }
    }
    row.samples = eval.size();
    row.qa_f1 = eval.empty() ? kNaN : total / static_cast<double>(eval.size());
    if (!gold.empty()) row.filter = filter_metrics(predicted, gold);
    report.rows.push_back(row);
  }
}

AttentionSummary attention_summary(const ModelEntry& model, std::span<const QASample> eval, const EvalOptions& opts) {
  AttentionSummary out;
  out.model = model.name;
  if (model.params == nullptr || eval.empty()) return out;
  FltlmParams& params = *model.params;
  size_t pos_n = 0, neg_n = 0;
  for (const auto& sample : eval) {
    const SegmentedInput input = build_input(sample, BuildMode::kInfer, params.model.config.max_context);
    DocumentBias bias;
    const bool soft = reads_with_soft_mask(model.regime);
    if (soft) {
      const auto scores = document_scores(params, sample, model.strategy.value_or(opts.strategy));
      std::vector<float> levels;
      for (double s : scores) {
        levels.push_back(intensity(static_cast<float>(s), params.mask.w.value()(0, 0), params.mask.b.value()(0, 0)));
      }
      bias = DocumentBias::from_input(input, levels);
    }
    const AttentionShare share = attention_share(params.model, input, soft ? &bias : nullptr);
    if (share.positives > 0) {
      out.positive += share.positive_mean;
      ++pos_n;
    }
    if (share.negatives > 0) {
      out.negative += share.negative_mean;
      ++neg_n;
    }
  }
  if (pos_n > 0) out.positive /= static_cast<double>(pos_n);
  if (neg_n > 0) out.negative /= static_cast<double>(neg_n);
  return out;
}

RecallCurves recall_curves(FltlmParams& params, std::span<const QASample> eval, const EvalOptions& opts,
                           std::uint64_t seed) {
  std::vector<std::vector<double>> trained, oracle, random;
  std::vector<std::vector<size_t>> gold;
  std::mt19937_64 rng(seed);
  size_t k_max = std::numeric_limits<size_t>::max();
  for (const auto& s : eval) {
    trained.push_back(document_scores(params, s, opts.strategy));
    oracle.push_back(oracle_scores(s));
    random.push_back(random_scores(s, rng));
    gold.push_back(gold_set(s));
    k_max = std::min(k_max, s.documents.size());
  }
  if (eval.empty()) return {};
  return {recall_curve(trained, gold, k_max), recall_curve(oracle, gold, k_max), recall_curve(random, gold, k_max)};
}

std::string recall_csv(const RecallCurves& curves, std::span<const std::string> header) {
  std::ostringstream os;
  for (const auto& h : header) os << "# " << h << '\n';
  os << "k,filter,oracle,random\n";
  for (size_t k = 0; k < curves.filter.size(); ++k) {
    os << k + 1 << ',' << fmt(curves.filter[k]) << ',' << fmt(curves.oracle[k]) << ',' << fmt(curves.random[k]) << '\n';
  }
  return os.str();
}

}  // namespace fltlm
