#include "fltlm/datagen.hpp"
#include "fltlm/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace fltlm;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.total_layers = 4;
  c.filter_layers = 2;
  c.max_context = 128;
  c.ffn_multiplier = 2;
  return c;
}

std::vector<QASample> tiny_data(size_t n, std::uint64_t seed = 1) {
  GenConfig g;
  g.n_docs = 3;
  g.facts_per_doc = 2;
  g.seed = seed;
  return generate_split(g, Split::kTrain, n);
}

TrainConfig tiny_train(Regime regime) {
  TrainConfig t;
  t.regime = regime;
  t.batch_size = 4;
  t.lr_multiplier = 20.0;
  t.warmup_ratio = 0.1;
  t.probe_every = 2;
  return t;
}

bool same_values(const FltlmParams& a, const FltlmParams& b) {
  auto& x = const_cast<FltlmParams&>(a);
  auto& y = const_cast<FltlmParams&>(b);
  const auto pa = x.parameters();
  const auto pb = y.parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->value() != pb[i]->value()) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("regime and margin names") {
    for (auto r : {Regime::kSft, Regime::kFltlm, Regime::kFltlmNoSoftmask, Regime::kFilterOnly, Regime::kFilterPlusLm}) {
      CHECK(parse_regime(to_string(r)) == r);
    }
    CHECK(parse_regime("fltlm_no_softmask") == Regime::kFltlmNoSoftmask);
    CHECK_THROWS(parse_regime("lora"));
    CHECK(MarginSetting::parse("learnable").learnable);
    const auto fixed = MarginSetting::parse("fixed:0.5");
    CHECK_FALSE(fixed.learnable);
    CHECK(fixed.value == 0.5);
    CHECK(MarginSetting::parse(fixed.to_string()) == fixed);
    CHECK_THROWS(MarginSetting::parse("fixed:-1"));
    CHECK_THROWS(MarginSetting::parse("sometimes"));
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda = -0.1;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.mu = -1.0;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    const size_t total = 1000;
    CHECK(lr_at(0, total, c).backbone == 0.0);
    CHECK(lr_at(10, total, c).backbone == doctest::Approx(1e-4));
    CHECK(lr_at(10, total, c).head == doctest::Approx(1e-2));
    CHECK(lr_at(total, total, c).backbone == 0.0);
    CHECK(lr_at(5, total, c).backbone == doctest::Approx(0.5e-4));
    CHECK(lr_at(505, total, c).backbone == doctest::Approx(0.5e-4));
    double prev = 1.0;
    for (size_t s = 10; s <= total; s += 10) {
      const double v = lr_at(s, total, c).backbone;
      CHECK(v <= prev);
      prev = v;
    }
    c.lr_multiplier = 3.0;
    CHECK(lr_at(10, total, c).head / lr_at(10, total, c).backbone == doctest::Approx(100.0));
    CHECK_THROWS(lr_at(total + 1, total, c));
  }

  TEST_CASE("trainable groups per regime") {
    auto params = init_fltlm(tiny_model(), 1);
    auto names = [&](Regime r) {
      std::vector<std::string> out;
      for (auto* p : trainable_parameters(params, r)) out.push_back(p->name);
      return out;
    };
    auto has = [](const std::vector<std::string>& v, const std::string& n) {
      return std::find(v.begin(), v.end(), n) != v.end();
    };
    const auto sft = names(Regime::kSft);
    CHECK(has(sft, "layer3.wq"));
    CHECK_FALSE(has(sft, "filter.weight"));
    CHECK_FALSE(has(sft, "softmask.w"));
    const auto no_mask = names(Regime::kFltlmNoSoftmask);
    CHECK(has(no_mask, "filter.weight"));
    CHECK_FALSE(has(no_mask, "softmask.b"));
    const auto joint = names(Regime::kFltlm);
    CHECK(has(joint, "softmask.w"));
    CHECK(has(joint, "filter.log_margin"));
    CHECK_FALSE(has(joint, "filter.log_temperature"));
    const auto filter = names(Regime::kFilterOnly);
    CHECK(has(filter, "layer1.w_out"));
    CHECK(has(filter, "embedding"));
    CHECK_FALSE(has(filter, "layer2.wq"));
    CHECK_FALSE(has(filter, "output"));
    CHECK_FALSE(has(filter, "softmask.w"));
  }

  TEST_CASE("AdamW matches the closed-form first step") {
    TrainConfig c;
    Parameter p("p", Matrix::Constant(2, 2, 1.0f));
    Parameter q("q", Matrix::Constant(1, 2, 1.0f), ParamGroup::kHead, false);
    p.frozen_rows = {1};
    p.grad().setConstant(0.5f);
    q.grad().setConstant(-2.0f);
    AdamW opt(c);
    std::vector<Parameter*> ps{&p, &q};
    opt.step(ps, {0.1, 0.2});
    // First step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
    const double moved = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p.value()(0, 0) == doctest::Approx(moved).epsilon(1e-6));
    CHECK(p.value()(1, 0) == 1.0f);
    CHECK(q.value()(0, 0) == doctest::Approx(1.0 + 0.2).epsilon(1e-6));
  }

  TEST_CASE("combined loss equals L_lm + lambda L_flt at every step") {
    auto cfg = tiny_train(Regime::kFltlm);
    cfg.lambda = 0.7;
    const auto data = tiny_data(16);
    const auto res = train(init_fltlm(tiny_model(), 2), data, {}, cfg);
    REQUIRE(res.log.size() == 4);
    for (const auto& l : res.log) CHECK(std::abs(l.loss - (l.lm_loss + cfg.lambda * l.flt_loss)) < 1e-6);

    cfg.regime = Regime::kFilterPlusLm;
    cfg.mu = 0.3;
    const auto fp = train(init_fltlm(tiny_model(), 2), data, {}, cfg);
    for (const auto& l : fp.log) CHECK(std::abs(l.loss - (l.flt_loss + cfg.mu * l.lm_loss)) < 1e-6);
  }

  TEST_CASE("lambda 0 with w = b = 0 frozen reproduces the sft losses") {
    const auto data = tiny_data(24, 3);
    auto joint = init_fltlm(tiny_model(), 3);
    joint.mask.w.value().setZero();
    joint.mask.b.value().setZero();
    joint.mask.w.trainable = false;
    joint.mask.b.trainable = false;
    auto cfg = tiny_train(Regime::kFltlm);
    cfg.lambda = 0.0;
    const auto a = train(joint, data, {}, cfg);
    const auto b = train(init_fltlm(tiny_model(), 3), data, {}, tiny_train(Regime::kSft));
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].lm_loss == b.log[i].lm_loss);
    const auto ma = const_cast<ModelParams&>(a.params.model).parameters();
    const auto mb = const_cast<ModelParams&>(b.params.model).parameters();
    for (size_t i = 0; i < ma.size(); ++i) CHECK(ma[i]->value() == mb[i]->value());
  }

  TEST_CASE("filter-only training leaves reader layers and sentinels untouched") {
    const auto init = init_fltlm(tiny_model(), 4);
    const auto res = train(init, tiny_data(16, 4), {}, tiny_train(Regime::kFilterOnly));
    const auto& m0 = init.model;
    const auto& m1 = res.params.model;
    for (int l = 2; l < 4; ++l) {
      auto& a = const_cast<BasicLayerParams<float>&>(m0.layers[l]);
      auto& b = const_cast<BasicLayerParams<float>&>(m1.layers[l]);
      for (size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i]->value() == b.parameters()[i]->value());
    }
    CHECK(m0.output.value() == m1.output.value());
    CHECK(m0.final_norm.value() == m1.final_norm.value());
    CHECK_FALSE(m0.layers[0].wq.value() == m1.layers[0].wq.value());
    CHECK_FALSE(init.head.weight.value() == res.params.head.weight.value());
    CHECK(init.mask.w.value() == res.params.mask.w.value());
    for (const auto& l : res.log) CHECK(std::isnan(l.lm_loss));
  }

  TEST_CASE("sentinel embeddings stay zero in every regime") {
    const auto& v = Vocabulary::standard();
    for (auto r : {Regime::kSft, Regime::kFltlm, Regime::kFltlmNoSoftmask, Regime::kFilterOnly, Regime::kFilterPlusLm}) {
      const auto res = train(init_fltlm(tiny_model(), 5), tiny_data(8, 5), {}, tiny_train(r));
      for (int i = 1; i <= Vocabulary::kMaxDocuments; ++i) {
        CHECK(res.params.model.embedding.value().row(v.sentinel(i)).isZero(0.0f));
      }
    }
  }

  TEST_CASE("no-softmask regime keeps w and b at their initial values") {
    const auto init = init_fltlm(tiny_model(), 6);
    const auto res = train(init, tiny_data(16, 6), {}, tiny_train(Regime::kFltlmNoSoftmask));
    CHECK(res.params.mask.w.value() == init.mask.w.value());
    CHECK(res.params.mask.b.value() == init.mask.b.value());
    for (const auto& l : res.log) {
      CHECK(std::isfinite(l.lm_loss));
      CHECK(std::isfinite(l.flt_loss));
    }
  }

  TEST_CASE("a non-finite loss skips the update and is logged") {
    auto params = init_fltlm(tiny_model(), 7);
    params.head.bias.value()(0, 0) = std::numeric_limits<float>::quiet_NaN();
    const auto before = params;
    AdamW opt(tiny_train(Regime::kFltlm));
    const auto data = tiny_data(4, 7);
    const auto log = train_step(params, data, tiny_train(Regime::kFltlm), opt, {1e-3, 1e-1});
    CHECK_FALSE(log.applied);
    auto pa = params.parameters();
    auto pb = const_cast<FltlmParams&>(before).parameters();
    for (size_t i = 0; i < pa.size(); ++i) {
      if (pa[i]->name == "filter.bias") continue;
      CHECK(pa[i]->value() == pb[i]->value());
    }
    CHECK(opt.steps() == 0);

    const auto res = train(params, data, {}, tiny_train(Regime::kFltlm));
    CHECK_FALSE(res.events.empty());
  }

  TEST_CASE("fixed margin is held; learnable margin moves") {
    auto cfg = tiny_train(Regime::kFltlm);
    cfg.margin = MarginSetting::parse("fixed:0.5");
    const auto fixed = train(init_fltlm(tiny_model(), 8), tiny_data(16, 8), {}, cfg);
    for (const auto& l : fixed.log) CHECK(l.margin == doctest::Approx(0.5));
    cfg.margin = MarginSetting{};
    const auto learn = train(init_fltlm(tiny_model(), 8), tiny_data(16, 8), {}, cfg);
    CHECK(learn.log.back().margin != 1.0);
  }

  TEST_CASE("same seed gives identical checkpoints; log and probe are recorded") {
    const auto data = tiny_data(16, 9);
    const auto probe = tiny_data(4, 99);
    auto cfg = tiny_train(Regime::kFltlm);
    const auto a = train(init_fltlm(tiny_model(), 9), data, probe, cfg);
    const auto b = train(init_fltlm(tiny_model(), 9), data, probe, cfg);
    CHECK(encode_checkpoint(to_checkpoint(a.params, "{}")) == encode_checkpoint(to_checkpoint(b.params, "{}")));
    CHECK(same_values(a.params, b.params));
    CHECK_FALSE(std::isnan(a.log[1].probe_accuracy));
    CHECK(std::isnan(a.log[0].probe_accuracy));
    cfg.seed = 10;
    const auto c = train(init_fltlm(tiny_model(), 9), data, probe, cfg);
    CHECK_FALSE(same_values(a.params, c.params));

    const std::vector<std::string> header{"seed=9"};
    const auto csv = train_log_csv(a.log, header);
    CHECK(csv.starts_with("# seed=9\nstep,L_lm,L_flt,loss,lr_backbone,lr_head,w,b,m,probe_acc\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2 + static_cast<long>(a.log.size()));
  }

  TEST_CASE("checkpoint round trip restores every parameter") {
    auto cfg = tiny_model();
    const auto params = init_fltlm(cfg, 11);
    const std::string meta = R"({"model":{"vocab_size":512,"d_model":16,"n_heads":2,"total_layers":4,"filter_layers":2,"max_context":128,"rotary":true,"ffn_multiplier":2}})";
    const auto back = from_checkpoint(decode_checkpoint(encode_checkpoint(to_checkpoint(params, meta))));
    CHECK(back.model.config == cfg);
    CHECK(same_values(params, back));
  }

  TEST_CASE("epoch callback fires once per epoch") {
    auto cfg = tiny_train(Regime::kSft);
    cfg.epochs = 3;
    int calls = 0;
    train(init_fltlm(tiny_model(), 12), tiny_data(8, 12), {}, cfg, {}, [&](int epoch, const FltlmParams&) {
      CHECK(epoch == ++calls);
    });
    CHECK(calls == 3);
  }
}
