#include "fltlm/grad_suite.hpp"

#include "fltlm/trainer.hpp"

#include <random>

namespace fltlm {

namespace {

MatrixX<double> uniform(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  MatrixX<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

GradCheckCase check(std::string name, double threshold, const std::function<Var<double>(Graph<double>&)>& f,
                    std::vector<BasicParameter<double>*> params) {
  std::vector<BasicParameter<double>*> live;
  for (auto* p : params) {
    if (p->trainable) live.push_back(p);
  }
  const auto rep = finite_diff_check(f, live, 1e-5);
  GradCheckCase c{std::move(name), rep.max_rel_error, threshold, rep.worst_param + "[" + std::to_string(rep.worst_index) + "]"};
  return c;
}

}  // namespace

std::vector<GradCheckCase> run_grad_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> out;

  BasicParameter<double> x("x", uniform(3, 4, rng));
  out.push_back(check("sum of squares", 1e-5, [&](Graph<double>& g) { return square_sum(g.parameter(x)); }, {&x}));

  BasicParameter<double> scores("scores", uniform(7, 1, rng, -3.0, 3.0));
  BasicParameter<double> log_tau("log_tau", MatrixX<double>::Constant(1, 1, 0.2));
  BasicParameter<double> log_margin("log_margin", MatrixX<double>::Constant(1, 1, -0.3));
  const std::vector<int> labels{1, 0, 0, 1, 0, 1, 0};
  out.push_back(check("L_flt", 1e-3, [&](Graph<double>& g) {
    return loss_flt(g.parameter(scores), std::span<const int>(labels), g.parameter(log_tau), g.parameter(log_margin));
  }, {&scores, &log_tau, &log_margin}));
  out.push_back(check("InfoNCE", 1e-3, [&](Graph<double>& g) {
    return loss_infonce(g.parameter(scores), 3, g.parameter(log_tau));
  }, {&scores, &log_tau}));
  out.push_back(check("InfoNCE*", 1e-3, [&](Graph<double>& g) {
    return loss_infonce_star(g.parameter(scores), 3, g.parameter(log_tau));
  }, {&scores, &log_tau}));

  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.total_layers = 2;
  mc.filter_layers = 1;
  mc.max_context = 64;
  mc.ffn_multiplier = 2;
  GenConfig gc;
  gc.n_docs = 2;
  gc.facts_per_doc = 1;
  gc.seed = seed;
  const QASample sample = generate_split(gc, Split::kTrain, 1).front();
  const SegmentedInput input = build_input(sample, BuildMode::kTrain, mc.max_context);
  FltlmParams init = init_fltlm(mc, seed);
  // Scale the head so scores are O(1) and both intensity branches occur.
  init.head.weight.value() *= 50.0f;
  init.mask.w.value()(0, 0) = 0.5f;
  init.mask.b.value()(0, 0) = -0.2f;
  BasicFltlmParams<double> p = init.cast<double>();

  TrainConfig sft;
  sft.regime = Regime::kSft;
  out.push_back(check("L_lm (micro-input)", 1e-2, [&](Graph<double>& g) {
    return fltlm_pass(g, p, sample, input, sft).loss;
  }, p.model.parameters()));

  TrainConfig joint;
  joint.regime = Regime::kFltlm;
  out.push_back(check("L_lm + lambda L_flt (micro-input)", 1e-2, [&](Graph<double>& g) {
    return fltlm_pass(g, p, sample, input, joint).loss;
  }, p.parameters()));
  out.push_back(check("soft-mask w, b (micro-input)", 1e-2, [&](Graph<double>& g) {
    return fltlm_pass(g, p, sample, input, joint).loss;
  }, p.mask.parameters()));
  return out;
}

}  // namespace fltlm
