#include "fltlm/trainer.hpp"

#include "fltlm/run_config.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace fltlm {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

Regime parse_regime(std::string_view name) {
  std::string n(name);
  for (auto& ch : n) {
    if (ch == '_') ch = '-';
  }
  if (n == "sft") return Regime::kSft;
  if (n == "fltlm") return Regime::kFltlm;
  if (n == "fltlm-no-softmask") return Regime::kFltlmNoSoftmask;
  if (n == "filter-only") return Regime::kFilterOnly;
  if (n == "filter-plus-lm") return Regime::kFilterPlusLm;
  throw std::invalid_argument("unknown regime '" + std::string(name) +
                              "' (expected sft, fltlm, fltlm-no-softmask, filter-only or filter-plus-lm)");
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kSft: return "sft";
    case Regime::kFltlm: return "fltlm";
    case Regime::kFltlmNoSoftmask: return "fltlm-no-softmask";
    case Regime::kFilterOnly: return "filter-only";
    case Regime::kFilterPlusLm: return "filter-plus-lm";
  }
  return "?";
}

bool uses_filter(Regime regime) { return regime != Regime::kSft; }

FltlmParams init_fltlm(const ModelConfig& config, std::uint64_t seed) {
  FltlmParams p;
  p.model = init_model(config, seed);
  p.head = init_filter_head(config.d_model, seed ^ 0x5eedf11e7ULL);
  return p;
}

MarginSetting MarginSetting::parse(std::string_view text) {
  if (text == "learnable") return {};
  constexpr std::string_view kPrefix = "fixed:";
  if (text.starts_with(kPrefix)) {
    const std::string rest(text.substr(kPrefix.size()));
    size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(rest, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == rest.size() && used > 0 && v > 0.0 && std::isfinite(v)) return {false, v};
  }
  throw std::invalid_argument("margin must be 'learnable' or 'fixed:<positive value>', got '" + std::string(text) + "'");
}

std::string MarginSetting::to_string() const {
  if (learnable) return "learnable";
  std::ostringstream os;
  os << "fixed:" << value;
  return os.str();
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (!(mu >= 0.0)) fail("mu must be >= 0");
  if (batch_size < 1) fail("batch_size must be positive");
  if (epochs < 1) fail("epochs must be positive");
  if (!(backbone_lr >= 0.0) || !(head_lr >= 0.0) || !(lr_multiplier >= 0.0)) fail("learning rates must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) fail("warmup_ratio must lie in [0, 1]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (probe_every < 0) fail("probe_every must be >= 0");
}

LearningRates lr_at(size_t step, size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) throw std::out_of_range("lr_at: step beyond total_steps");
  const double total = static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  const double warm = cfg.warmup_ratio * total;
  double factor = 0.0;
  if (total_steps == 0) {
    factor = 0.0;
  } else if (s < warm) {
    factor = s / warm;
  } else if (total > warm) {
    factor = (total - s) / (total - warm);
  }
  return {cfg.backbone_lr * cfg.lr_multiplier * factor, cfg.head_lr * cfg.lr_multiplier * factor};
}

template <typename Scalar>
PassResult<Scalar> fltlm_pass(Graph<Scalar>& graph, BasicFltlmParams<Scalar>& params, const QASample& sample,
                              const SegmentedInput& input, const TrainConfig& cfg) {
  // Logits are only needed where the answer is supervised.
  const auto all_targets = input.next_token_targets();
  const auto all_rows = input.loss_rows();
  std::vector<Index> logit_rows;
  std::vector<int> targets;
  for (size_t t = 0; t < all_rows.size(); ++t) {
    if (!all_rows[t]) continue;
    logit_rows.push_back(static_cast<Index>(t));
    targets.push_back(all_targets[t]);
  }
  const std::vector<bool> rows(targets.size(), true);
  PassResult<Scalar> r;
  if (cfg.regime == Regime::kSft) {
    ForwardRequest<Scalar> req;
    req.tokens = input.tokens;
    req.logit_rows = logit_rows;
    auto out = forward(graph, params.model, req);
    r.lm = cross_entropy(*out.logits, targets, rows);
    r.loss = *r.lm;
    return r;
  }

  std::optional<Var<Scalar>> hidden_n;
  r.scores = filter_scores(graph, params.model, params.head, sample, input, cfg.strategy, &hidden_n);
  r.flt = loss_flt(*r.scores, std::span<const int>(input.relevance_labels), graph.parameter(params.head.log_temperature),
                   graph.parameter(params.head.log_margin));
  // A non-finite filter loss would poison the mask bias; report it as the loss.
  if (cfg.regime == Regime::kFilterOnly || !std::isfinite(static_cast<double>(r.flt->item()))) {
    r.loss = *r.flt;
    return r;
  }

  ForwardRequest<Scalar> req;
  req.tokens = input.tokens;
  req.start_layer = params.model.config.filter_layers;
  req.resume_from = hidden_n;
  req.logit_rows = logit_rows;
  if (cfg.regime != Regime::kFltlmNoSoftmask) {
    r.intensities = intensities(*r.scores, graph.parameter(params.mask.w), graph.parameter(params.mask.b));
    req.reader_bias = build_bias(input, *r.intensities, input.length());
  }
  auto out = forward(graph, params.model, req);
  r.lm = cross_entropy(*out.logits, targets, rows);
  if (cfg.regime == Regime::kFilterPlusLm) {
    r.loss = add(*r.flt, scale(*r.lm, static_cast<Scalar>(cfg.mu)));
  } else {
    r.loss = add(*r.lm, scale(*r.flt, static_cast<Scalar>(cfg.lambda)));
  }
  return r;
}

template PassResult<float> fltlm_pass(Graph<float>&, BasicFltlmParams<float>&, const QASample&, const SegmentedInput&,
                                      const TrainConfig&);
template PassResult<double> fltlm_pass(Graph<double>&, BasicFltlmParams<double>&, const QASample&,
                                       const SegmentedInput&, const TrainConfig&);

std::vector<Parameter*> trainable_parameters(FltlmParams& params, Regime regime) {
  std::vector<Parameter*> out;
  auto take = [&out](Parameter* p) {
    if (p->trainable) out.push_back(p);
  };
  if (regime == Regime::kFilterOnly) {
    take(&params.model.embedding);
    for (int l = 0; l < params.model.config.filter_layers; ++l) {
      for (auto* p : params.model.layers[static_cast<size_t>(l)].parameters()) take(p);
    }
  } else {
    for (auto* p : params.model.parameters()) take(p);
  }
  if (regime != Regime::kSft) {
    for (auto* p : params.head.parameters()) take(p);
  }
  if (regime == Regime::kFltlm || regime == Regime::kFilterPlusLm) {
    for (auto* p : params.mask.parameters()) take(p);
  }
  return out;
}

void AdamW::step(std::span<Parameter* const> params, const LearningRates& lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  for (Parameter* p : params) {
    Matrix& value = p->value();
    Matrix& grad = p->grad();
    for (Index r : p->frozen_rows) grad.row(r).setZero();
    auto [it, fresh] = moments_.try_emplace(p->name);
    Moments& mo = it->second;
    if (fresh) {
      mo.m = Matrix::Zero(value.rows(), value.cols());
      mo.v = Matrix::Zero(value.rows(), value.cols());
    }
    mo.m = b1 * mo.m + (1.0f - b1) * grad;
    mo.v = b2 * mo.v + (1.0f - b2) * grad.cwiseProduct(grad);
    const double rate = p->group == ParamGroup::kHead ? lr.head : lr.backbone;
    const float step_size = static_cast<float>(rate / bc1);
    const float denom_scale = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(cfg_.adam_eps);
    Matrix saved;
    if (!p->frozen_rows.empty()) saved = value;
    if (p->decay && cfg_.weight_decay > 0.0) value *= static_cast<float>(1.0 - rate * cfg_.weight_decay);
    value.array() -= step_size * mo.m.array() / (mo.v.array().sqrt() * denom_scale + eps);
    for (Index r : p->frozen_rows) value.row(r) = saved.row(r);
  }
}

StepLog train_step(FltlmParams& params, std::span<const QASample> batch, const TrainConfig& cfg, AdamW& optimizer,
                   const LearningRates& lr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  StepLog log;
  log.lr_backbone = lr.backbone;
  log.lr_head = lr.head;
  log.probe_accuracy = kNaN;
  for (auto* p : params.parameters()) p->tensor.zero_grad();
  const auto trainable = trainable_parameters(params, cfg.regime);
  double lm = 0.0, flt = 0.0, total = 0.0;
  bool have_lm = false, have_flt = false;
  auto abort = [&]() {
    for (auto* p : params.parameters()) p->tensor.zero_grad();
    log.applied = false;
    log.lm_loss = log.flt_loss = log.loss = kNaN;
  };
  for (const auto& sample : batch) {
    const SegmentedInput input = build_input(sample, BuildMode::kTrain, params.model.config.max_context);
    Graph<float> graph;
    auto res = fltlm_pass(graph, params, sample, input, cfg);
    const double value = res.loss.item();
    if (!std::isfinite(value)) {
      abort();
      return log;
    }
    total += value;
    if (res.lm) {
      lm += res.lm->item();
      have_lm = true;
    }
    if (res.flt) {
      flt += res.flt->item();
      have_flt = true;
    }
    graph.backward(res.loss);
  }
  const double n = static_cast<double>(batch.size());
  double norm_sq = 0.0;
  for (auto* p : trainable) {
    Matrix& g = p->grad();
    g /= static_cast<float>(n);
    for (Index r : p->frozen_rows) g.row(r).setZero();
    norm_sq += g.template cast<double>().squaredNorm();
  }
  if (!std::isfinite(norm_sq)) {
    abort();
    return log;
  }
  const double norm = std::sqrt(norm_sq);
  if (norm > cfg.grad_clip) {
    const float factor = static_cast<float>(cfg.grad_clip / norm);
    for (auto* p : trainable) p->grad() *= factor;
  }
  optimizer.step(trainable, lr);
  log.lm_loss = have_lm ? lm / n : kNaN;
  log.flt_loss = have_flt ? flt / n : kNaN;
  log.loss = total / n;
  return log;
}

double probe_filter_accuracy(FltlmParams& params, std::span<const QASample> probe, ExtractionStrategy strategy) {
  size_t correct = 0, seen = 0;
  for (const auto& sample : probe) {
    const SegmentedInput input = build_input(sample, BuildMode::kInfer, params.model.config.max_context);
    Graph<float> graph;
    graph.set_grad_enabled(false);
    auto scores = filter_scores(graph, params.model, params.head, sample, input, strategy);
    for (size_t i = 0; i < input.document_count(); ++i) {
      const bool predicted = scores.value()(static_cast<Index>(i), 0) > 0.0f;
      correct += predicted == (input.relevance_labels[i] == 1) ? 1 : 0;
      ++seen;
    }
  }
  return seen == 0 ? kNaN : static_cast<double>(correct) / static_cast<double>(seen);
}

TrainResult train(FltlmParams params, std::span<const QASample> data, std::span<const QASample> probe,
                  const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step,
                  const std::function<void(int, const FltlmParams&)>& on_epoch) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.margin.learnable) {
    params.head.log_margin.trainable = true;
  } else {
    params.head.fix_margin(static_cast<float>(cfg.margin.value));
  }
  TrainResult result;
  const size_t per_epoch = (data.size() + static_cast<size_t>(cfg.batch_size) - 1) / static_cast<size_t>(cfg.batch_size);
  result.total_steps = per_epoch * static_cast<size_t>(cfg.epochs);
  AdamW optimizer(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(data.size());
  std::vector<QASample> batch;
  size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      batch.clear();
      for (size_t i = begin; i < end; ++i) batch.push_back(data[order[i]]);
      StepLog log = train_step(params, batch, cfg, optimizer, lr_at(step, result.total_steps, cfg));
      log.step = step;
      if (!log.applied) {
        result.events.push_back("step " + std::to_string(step) + ": non-finite loss or gradient, update skipped");
      }
      log.w = params.mask.w.value()(0, 0);
      log.b = params.mask.b.value()(0, 0);
      log.margin = params.head.margin();
      const bool last = step + 1 == result.total_steps;
      if (uses_filter(cfg.regime) && !probe.empty() && cfg.probe_every > 0 &&
          ((step + 1) % static_cast<size_t>(cfg.probe_every) == 0 || last)) {
        log.probe_accuracy = probe_filter_accuracy(params, probe, cfg.strategy);
      }
      if (on_step) on_step(log);
      result.log.push_back(log);
      ++step;
    }
    if (on_epoch) on_epoch(epoch + 1, params);
  }
  result.params = std::move(params);
  return result;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string train_log_csv(std::span<const StepLog> log, std::span<const std::string> header) {
  std::ostringstream os;
  for (const auto& h : header) os << "# " << h << '\n';
  os << "step,L_lm,L_flt,loss,lr_backbone,lr_head,w,b,m,probe_acc\n";
  for (const auto& r : log) {
    os << r.step << ',' << fmt(r.lm_loss) << ',' << fmt(r.flt_loss) << ',' << fmt(r.loss) << ',' << fmt(r.lr_backbone)
       << ',' << fmt(r.lr_head) << ',' << fmt(r.w) << ',' << fmt(r.b) << ',' << fmt(r.margin) << ','
       << fmt(r.probe_accuracy) << '\n';
  }
  return os.str();
}

Checkpoint to_checkpoint(const FltlmParams& params, const std::string& metadata_json) {
  Checkpoint ckpt;
  ckpt.metadata = metadata_json;
  append_to_checkpoint(params.model, ckpt);
  auto& head = const_cast<FltlmParams&>(params).head;
  auto& mask = const_cast<FltlmParams&>(params).mask;
  for (auto* p : head.parameters()) ckpt.arrays.push_back({p->name, p->value()});
  for (auto* p : mask.parameters()) ckpt.arrays.push_back({p->name, p->value()});
  return ckpt;
}

FltlmParams from_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  if (!meta.contains("model")) throw CheckpointError("checkpoint metadata lacks a model section");
  const ModelConfig config = model_config_from_json(meta.at("model"));
  FltlmParams p;
  p.model = model_from_checkpoint(config, ckpt);
  p.head = init_filter_head(config.d_model, 0);
  auto load = [&ckpt](Parameter* param) {
    const Matrix& stored = ckpt.get(param->name);
    if (stored.rows() != param->value().rows() || stored.cols() != param->value().cols()) {
      throw CheckpointError("checkpoint array '" + param->name + "' has the wrong shape");
    }
    param->value() = stored;
  };
  for (auto* q : p.head.parameters()) load(q);
  for (auto* q : p.mask.parameters()) load(q);
  return p;
}

}  // namespace fltlm
