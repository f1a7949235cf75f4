#include "fltlm/model.hpp"

#include "fltlm/detail/kernels.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace fltlm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (d_model <= 0 || n_heads <= 0) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (rotary && head_dim() % 2 != 0) fail("rotary encoding needs an even head dimension");
  if (total_layers < 2) fail("total_layers must be at least 2");
  if (filter_layers < 1 || filter_layers >= total_layers) {
    fail("filter_layers " + std::to_string(filter_layers) + " must lie in [1, " + std::to_string(total_layers - 1) +
         "]");
  }
  if (max_context <= 0) fail("max_context must be positive");
  if (ffn_multiplier <= 0) fail("ffn_multiplier must be positive");
}

void ModelConfig::set_filter_proportion(double proportion) {
  if (!(proportion > 0.0 && proportion < 1.0)) {
    throw std::invalid_argument("filter proportion must lie in (0, 1)");
  }
  filter_layers = static_cast<int>(std::lround(proportion * total_layers));
  validate();
}

template <typename Scalar>
std::vector<BasicParameter<Scalar>*> BasicModelParams<Scalar>::parameters() {
  std::vector<BasicParameter<Scalar>*> out{&embedding};
  for (auto& layer : layers) {
    for (auto* p : layer.parameters()) out.push_back(p);
  }
  out.push_back(&final_norm);
  out.push_back(&output);
  return out;
}

template <typename Scalar>
std::vector<const BasicParameter<Scalar>*> BasicModelParams<Scalar>::parameters() const {
  auto* self = const_cast<BasicModelParams<Scalar>*>(this);
  std::vector<const BasicParameter<Scalar>*> out;
  for (auto* p : self->parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
template <typename Other>
BasicModelParams<Other> BasicModelParams<Scalar>::cast() const {
  BasicModelParams<Other> out;
  out.config = config;
  out.embedding = embedding.template cast<Other>();
  out.final_norm = final_norm.template cast<Other>();
  out.output = output.template cast<Other>();
  for (const auto& layer : layers) {
    BasicLayerParams<Other> l;
    l.attn_norm = layer.attn_norm.template cast<Other>();
    l.wq = layer.wq.template cast<Other>();
    l.wk = layer.wk.template cast<Other>();
    l.wv = layer.wv.template cast<Other>();
    l.wo = layer.wo.template cast<Other>();
    l.ffn_norm = layer.ffn_norm.template cast<Other>();
    l.w_in = layer.w_in.template cast<Other>();
    l.w_out = layer.w_out.template cast<Other>();
    out.layers.push_back(std::move(l));
  }
  return out;
}

template struct BasicModelParams<float>;
template struct BasicModelParams<double>;
template BasicModelParams<double> BasicModelParams<float>::cast<double>() const;
template BasicModelParams<float> BasicModelParams<double>::cast<float>() const;
template BasicModelParams<float> BasicModelParams<float>::cast<float>() const;

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto gaussian = [&rng](Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
    return m;
  };
  const Index d = config.d_model;
  const Index hidden = d * config.ffn_multiplier;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double residual_std = in_std / std::sqrt(2.0 * config.total_layers);

  ModelParams p;
  p.config = config;
  p.embedding = Parameter("embedding", gaussian(config.vocab_size, d, 0.5));
  const auto& vocab = Vocabulary::standard();
  for (int i = 1; i <= Vocabulary::kMaxDocuments; ++i) {
    const Index row = vocab.sentinel(i);
    p.embedding.value().row(row).setZero();
    p.embedding.frozen_rows.push_back(row);
  }
  for (int l = 0; l < config.total_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    BasicLayerParams<float> layer;
    layer.attn_norm = Parameter(prefix + "attn_norm", Matrix::Ones(1, d), ParamGroup::kBackbone, false);
    layer.wq = Parameter(prefix + "wq", gaussian(d, d, in_std));
    layer.wk = Parameter(prefix + "wk", gaussian(d, d, in_std));
    layer.wv = Parameter(prefix + "wv", gaussian(d, d, in_std));
    layer.wo = Parameter(prefix + "wo", gaussian(d, d, residual_std));
    layer.ffn_norm = Parameter(prefix + "ffn_norm", Matrix::Ones(1, d), ParamGroup::kBackbone, false);
    layer.w_in = Parameter(prefix + "w_in", gaussian(d, hidden, in_std));
    layer.w_out = Parameter(prefix + "w_out", gaussian(hidden, d, residual_std / std::sqrt(config.ffn_multiplier)));
    p.layers.push_back(std::move(layer));
  }
  p.final_norm = Parameter("final_norm", Matrix::Ones(1, d), ParamGroup::kBackbone, false);
  p.output = Parameter("output", gaussian(d, config.vocab_size, in_std));
  return p;
}

template <typename Scalar>
ForwardResult<Scalar> forward(Graph<Scalar>& graph, BasicModelParams<Scalar>& params,
                              const ForwardRequest<Scalar>& request) {
  const auto& cfg = params.config;
  const Index len = static_cast<Index>(request.tokens.size());
  if (len == 0) throw std::invalid_argument("forward: empty token sequence");
  if (len > cfg.max_context) {
    throw ContextOverflow(len, cfg.max_context);
  }
  if (request.reader_bias) {
    const auto& b = request.reader_bias->value();
    if (b.rows() != len || b.cols() != len) {
      throw ShapeError("forward: reader bias must be " + shape_string(len, len) + ", got " +
                       shape_string(b.rows(), b.cols()));
    }
    if (b.size() > 0 && b.maxCoeff() > Scalar(0)) throw std::invalid_argument("forward: reader bias has positive entries");
  }
  const int stop = request.stop_layer < 0 ? cfg.total_layers : request.stop_layer;
  if (stop > cfg.total_layers) throw std::invalid_argument("forward: stop_layer beyond model depth");
  if (request.start_layer < 0 || request.start_layer > stop) throw std::invalid_argument("forward: bad start_layer");

  ForwardResult<Scalar> result;
  Var<Scalar> x;
  if (request.start_layer == 0) {
    x = embedding(graph.parameter(params.embedding), request.tokens);
  } else {
    if (!request.resume_from) throw std::invalid_argument("forward: start_layer > 0 needs resume_from");
    x = *request.resume_from;
    if (x.rows() != len || x.cols() != cfg.d_model) throw ShapeError("forward: resume_from has wrong shape");
  }
  result.hidden.push_back(x);
  for (int l = request.start_layer; l < stop; ++l) {
    auto& layer = params.layers[static_cast<size_t>(l)];
    const bool reader = l >= cfg.filter_layers;
    Var<Scalar> h = rms_norm(x, graph.parameter(layer.attn_norm));
    Var<Scalar> q = matmul(h, graph.parameter(layer.wq));
    Var<Scalar> k = matmul(h, graph.parameter(layer.wk));
    Var<Scalar> v = matmul(h, graph.parameter(layer.wv));
    if (cfg.rotary) {
      q = rope(q, cfg.n_heads);
      k = rope(k, cfg.n_heads);
    }
    AttentionMasks<Scalar> masks;
    if (reader) {
      masks.bias = request.reader_bias;
      masks.probe = request.reader_probe;
    } else {
      masks.hard = request.filter_mask;
    }
    Var<Scalar> att = causal_attention(q, k, v, cfg.n_heads, masks);
    x = add(x, matmul(att, graph.parameter(layer.wo)));
    Var<Scalar> f = gelu(matmul(rms_norm(x, graph.parameter(layer.ffn_norm)), graph.parameter(layer.w_in)));
    x = add(x, matmul(f, graph.parameter(layer.w_out)));
    result.hidden.push_back(x);
  }
  if (stop == cfg.total_layers) {
    if (!request.logit_rows.empty()) x = select_rows(x, request.logit_rows);
    result.logits = matmul(rms_norm(x, graph.parameter(params.final_norm)), graph.parameter(params.output));
  }
  return result;
}

template ForwardResult<float> forward(Graph<float>&, BasicModelParams<float>&, const ForwardRequest<float>&);
template ForwardResult<double> forward(Graph<double>&, BasicModelParams<double>&, const ForwardRequest<double>&);

// ---- cached decoding ---------------------------------------------------------

namespace {

Matrix rms_rows(const Matrix& x, const Matrix& gain) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) detail::rms_norm_row<float>(x.row(r), gain.row(0), out.row(r), 1e-5f);
  return out;
}

Matrix rotate(const Matrix& x, int n_heads, Index offset) {
  Matrix cosv, sinv, out;
  detail::rope_tables<float>(x.rows(), x.cols() / n_heads / 2, offset, 10000.0f, cosv, sinv);
  detail::rope_apply(x, out, n_heads, cosv, sinv, false);
  return out;
}

}  // namespace

InferenceSession::InferenceSession(const ModelParams& params, const DocumentBias* bias)
    : params_(params), bias_(bias), keys_(params.layers.size()), values_(params.layers.size()) {
  for (size_t l = 0; l < keys_.size(); ++l) {
    keys_[l].resize(0, params.config.d_model);
    values_[l].resize(0, params.config.d_model);
  }
}

Vector InferenceSession::append(std::span<const int> tokens, AttentionProbe* reader_probe) {
  const auto& cfg = params_.config;
  const Index m = static_cast<Index>(tokens.size());
  if (m == 0) throw std::invalid_argument("InferenceSession::append: no tokens");
  const Index start = length_;
  const Index total = start + m;
  if (total > cfg.max_context) {
    throw ContextOverflow(total, cfg.max_context);
  }
  const Index d = cfg.d_model;
  const Index head_dim = cfg.head_dim();
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));
  constexpr float kNegInf = -std::numeric_limits<float>::infinity();

  Matrix x(m, d);
  for (Index i = 0; i < m; ++i) {
    const int t = tokens[static_cast<size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
    x.row(i) = params_.embedding.value().row(t);
  }

  std::vector<float> row_scores(static_cast<size_t>(total));
  for (size_t l = 0; l < params_.layers.size(); ++l) {
    const auto& layer = params_.layers[l];
    const bool reader = static_cast<int>(l) >= cfg.filter_layers;
    const Matrix h = rms_rows(x, layer.attn_norm.value());
    Matrix q = h * layer.wq.value();
    Matrix k = h * layer.wk.value();
    const Matrix v = h * layer.wv.value();
    if (cfg.rotary) {
      q = rotate(q, cfg.n_heads, start);
      k = rotate(k, cfg.n_heads, start);
    }
    keys_[l].conservativeResize(total, d);
    values_[l].conservativeResize(total, d);
    keys_[l].bottomRows(m) = k;
    values_[l].bottomRows(m) = v;

    Matrix probe_rec;
    std::vector<std::pair<Index, Index>> probe_hits;  // (probe slot, local row)
    if (reader && reader_probe != nullptr) {
      for (size_t s = 0; s < reader_probe->rows.size(); ++s) {
        const Index r = reader_probe->rows[s];
        if (r >= start && r < total) probe_hits.emplace_back(static_cast<Index>(s), r - start);
      }
      if (!probe_hits.empty()) probe_rec = Matrix::Zero(static_cast<Index>(reader_probe->rows.size()), total);
    }

    Matrix att(m, d);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const Index c0 = hd * head_dim;
      Matrix s = (q.middleCols(c0, head_dim) * keys_[l].middleCols(c0, head_dim).transpose()) * inv_sqrt;
      Matrix p = Matrix::Zero(m, total);
      for (Index i = 0; i < m; ++i) {
        const Index r = start + i;
        std::span<float> scores(row_scores.data(), static_cast<size_t>(total));
        for (Index c = 0; c < total; ++c) scores[static_cast<size_t>(c)] = s(i, c);
        if (reader && bias_ != nullptr) bias_->add_to_row(r, scores);
        float top = kNegInf;
        for (Index c = 0; c <= r; ++c) top = std::max(top, scores[static_cast<size_t>(c)]);
        float sum = 0.0f;
        for (Index c = 0; c <= r; ++c) {
          const float e = std::exp(scores[static_cast<size_t>(c)] - top);
          p(i, c) = e;
          sum += e;
        }
        p.row(i).head(r + 1) /= sum;
      }
      att.middleCols(c0, head_dim).noalias() = p * values_[l].middleCols(c0, head_dim);
      for (const auto& [slot, local] : probe_hits) probe_rec.row(slot) += p.row(local);
    }
    if (!probe_hits.empty()) {
      probe_rec /= static_cast<float>(cfg.n_heads);
      reader_probe->per_layer.push_back(std::move(probe_rec));
    }
    x += att * layer.wo.value();
    const Matrix f = (rms_rows(x, layer.ffn_norm.value()) * layer.w_in.value()).unaryExpr([](float z) {
      return detail::gelu_value(z);
    });
    x += f * layer.w_out.value();
  }
  length_ = total;
  const Matrix last = rms_rows(x.bottomRows(1), params_.final_norm.value());
  return (last * params_.output.value()).transpose();
}

namespace {

int argmax(const Vector& logits) {
  Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

template <typename NextLogits>
Generation decode(const SegmentedInput& input, Index max_context, int max_new_tokens, NextLogits&& next) {
  Generation gen;
  if (max_new_tokens <= 0) return gen;
  const int delimiter = Vocabulary::standard().answer_delimiter();
  std::vector<int> sequence = input.tokens;
  Vector logits = next(sequence, std::span<const int>(sequence));
  while (true) {
    const int t = argmax(logits);
    if (t == delimiter) break;
    gen.tokens.push_back(t);
    if (static_cast<int>(gen.tokens.size()) >= max_new_tokens) break;
    if (static_cast<Index>(sequence.size()) >= max_context) {
      gen.truncated = true;
      break;
    }
    sequence.push_back(t);
    logits = next(sequence, std::span<const int>(&sequence.back(), 1));
  }
  return gen;
}

}  // namespace

Generation generate(const ModelParams& params, const SegmentedInput& input, const DocumentBias* bias,
                    int max_new_tokens) {
  InferenceSession session(params, bias);
  return decode(input, params.config.max_context, max_new_tokens,
                [&session](const std::vector<int>&, std::span<const int> fresh) { return session.append(fresh); });
}

Generation generate_uncached(ModelParams& params, const SegmentedInput& input, const DocumentBias* bias,
                             int max_new_tokens) {
  return decode(input, params.config.max_context, max_new_tokens,
                [&](const std::vector<int>& sequence, std::span<const int>) {
                  Graph<float> graph;
                  graph.set_grad_enabled(false);
                  ForwardRequest<float> req;
                  req.tokens = sequence;
                  if (bias != nullptr) req.reader_bias = graph.constant(bias->dense(static_cast<Index>(sequence.size())));
                  auto out = forward(graph, params, req);
                  const auto& logits = out.logits->value();
                  return Vector(logits.row(logits.rows() - 1).transpose());
                });
}

AttentionShare attention_share(const ModelParams& params, const SegmentedInput& input, const DocumentBias* bias) {
  if (input.answer_start <= 0) throw std::invalid_argument("attention_share: input has no answer position");
  const Index row = input.answer_start - 1;
  AttentionProbe probe;
  probe.rows = {row};
  InferenceSession session(params, bias);
  session.append(std::span<const int>(input.tokens.data(), static_cast<size_t>(row + 1)), &probe);

  AttentionShare share;
  const size_t n = input.document_count();
  share.per_document.assign(n, 0.0);
  for (const auto& rec : probe.per_layer) {
    for (size_t i = 0; i < n; ++i) {
      const Span cols = input.masked_columns(i);
      share.per_document[i] += rec.row(0).segment(cols.begin, cols.end - cols.begin).sum();
    }
  }
  const double layers = static_cast<double>(probe.per_layer.size());
  double pos = 0.0, neg = 0.0;
  for (size_t i = 0; i < n; ++i) {
    share.per_document[i] /= layers;
    if (input.relevance_labels[i]) {
      pos += share.per_document[i];
      ++share.positives;
    } else {
      neg += share.per_document[i];
      ++share.negatives;
    }
  }
  if (share.positives > 0) share.positive_mean = pos / static_cast<double>(share.positives);
  if (share.negatives > 0) share.negative_mean = neg / static_cast<double>(share.negatives);
  return share;
}

void append_to_checkpoint(const ModelParams& params, Checkpoint& ckpt) {
  for (const auto* p : params.parameters()) ckpt.arrays.push_back({p->name, p->value()});
}

ModelParams model_from_checkpoint(const ModelConfig& config, const Checkpoint& ckpt) {
  ModelParams params = init_model(config, 0);
  for (auto* p : params.parameters()) {
    const Matrix& stored = ckpt.get(p->name);
    if (stored.rows() != p->value().rows() || stored.cols() != p->value().cols()) {
      throw CheckpointError("checkpoint array '" + p->name + "' has shape " + shape_string(stored.rows(), stored.cols()) +
                            ", model expects " + shape_string(p->value().rows(), p->value().cols()));
    }
    p->value() = stored;
  }
  return params;
}

}  // namespace fltlm
