#include "fltlm/datagen.hpp"
#include "fltlm/model.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace fltlm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.total_layers = 4;
  c.filter_layers = 2;
  c.max_context = 128;
  c.ffn_multiplier = 2;
  return c;
}

QASample small_sample(std::uint64_t seed, int n_docs = 3) {
  GenConfig g;
  g.n_docs = n_docs;
  g.facts_per_doc = 2;
  g.seed = seed;
  return generate_split(g, Split::kTrain, 1).front();
}

Matrix logits_of(ModelParams& p, std::span<const int> tokens, const Matrix* bias = nullptr,
                 std::vector<Matrix>* hidden = nullptr) {
  Graph<float> g;
  g.set_grad_enabled(false);
  ForwardRequest<float> req;
  req.tokens = tokens;
  if (bias) req.reader_bias = g.constant(*bias);
  auto res = forward(g, p, req);
  if (hidden) {
    hidden->clear();
    for (auto& h : res.hidden) hidden->push_back(h.value());
  }
  return res.logits->value();
}

Matrix doc_bias(const SegmentedInput& in, size_t doc, float level) {
  std::vector<float> levels(in.document_count(), 0.0f);
  levels[doc] = level;
  return DocumentBias::from_input(in, levels).dense(in.length());
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation and filter proportion") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.set_filter_proportion(0.25);
    CHECK(c.filter_layers == 2);
    c.set_filter_proportion(0.75);
    CHECK(c.filter_layers == 6);
    CHECK_THROWS(c.set_filter_proportion(1.0));
    ModelConfig bad;
    bad.n_heads = 5;
    CHECK_THROWS(bad.validate());
    bad = ModelConfig{};
    bad.filter_layers = 8;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("sentinel embeddings start at zero and are frozen") {
    const auto p = init_model(ModelConfig{}, 3);
    const auto& v = Vocabulary::standard();
    for (int i = 1; i <= Vocabulary::kMaxDocuments; ++i) {
      CHECK(p.embedding.value().row(v.sentinel(i)).isZero(0.0f));
      CHECK(std::find(p.embedding.frozen_rows.begin(), p.embedding.frozen_rows.end(), v.sentinel(i)) !=
            p.embedding.frozen_rows.end());
    }
  }

  TEST_CASE("forward matches the reference transformer") {
    auto p = init_model(small_config(), 4);
    const auto in = build_input(small_sample(1), BuildMode::kTrain, 128);
    const Matrix got = logits_of(p, in.tokens);
    const auto ref = oracle::forward(p, in.tokens);
    CHECK(oracle::max_abs_diff(oracle::to_grid(got), ref) < 1e-4);

    // With a soft-mask bias in the reader layers.
    std::vector<float> levels{-0.7f, 0.0f, -2.5f};
    const Matrix bias = DocumentBias::from_input(in, levels).dense(in.length());
    oracle::ForwardSpec spec;
    spec.reader_bias = oracle::to_grid(bias);
    CHECK(oracle::max_abs_diff(oracle::to_grid(logits_of(p, in.tokens, &bias)), oracle::forward(p, in.tokens, spec)) <
          1e-4);
  }

  TEST_CASE("zero bias and no bias agree bitwise; positive bias is rejected") {
    auto p = init_model(small_config(), 5);
    const auto in = build_input(small_sample(2), BuildMode::kTrain, 128);
    const Matrix zero = Matrix::Zero(in.length(), in.length());
    CHECK(logits_of(p, in.tokens) == logits_of(p, in.tokens, &zero));
    Matrix pos = zero;
    pos(in.length() - 1, 0) = 0.5f;
    CHECK_THROWS(logits_of(p, in.tokens, &pos));
  }

  TEST_CASE("a -1e9 bias equals physically deleting the document columns") {
    auto p = init_model(small_config(), 6);
    const auto in = build_input(small_sample(3), BuildMode::kTrain, 128);
    const Matrix bias = doc_bias(in, 1, -1e9f);
    oracle::ForwardSpec spec;
    const Span cols = in.masked_columns(1);
    for (Index c = cols.begin; c < cols.end; ++c) spec.deleted_columns.insert(static_cast<size_t>(c));
    spec.deletion_first_row = static_cast<size_t>(in.sentinel_positions[1]);
    CHECK(oracle::max_abs_diff(oracle::to_grid(logits_of(p, in.tokens, &bias)), oracle::forward(p, in.tokens, spec)) <
          1e-5);
  }

  TEST_CASE("single token input") {
    auto p = init_model(small_config(), 7);
    const std::vector<int> tok{40};
    const Matrix l = logits_of(p, tok);
    CHECK(l.allFinite());
    AttentionProbe probe;
    probe.rows = {0};
    InferenceSession s(p);
    s.append(tok, &probe);
    REQUIRE_FALSE(probe.per_layer.empty());
    for (const auto& rec : probe.per_layer) CHECK(rec(0, 0) == 1.0f);
  }

  TEST_CASE("property: causality") {
    auto p = init_model(small_config(), 8);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const auto in = build_input(small_sample(100 + trial), BuildMode::kTrain, 128);
      const Index t = static_cast<Index>(rng() % static_cast<std::uint64_t>(in.length() - 1));
      auto changed = in.tokens;
      for (Index j = t + 1; j < in.length(); ++j) changed[j] = 40 + static_cast<int>(rng() % 400);
      const Matrix a = logits_of(p, in.tokens);
      const Matrix b = logits_of(p, changed);
      CHECK(a.topRows(t + 1) == b.topRows(t + 1));
    }
  }

  TEST_CASE("property: bias locality and filter-path purity") {
    auto p = init_model(small_config(), 9);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      const auto in = build_input(small_sample(200 + trial, 4), BuildMode::kTrain, 128);
      const size_t doc = rng() % in.document_count();
      const Matrix bias = doc_bias(in, doc, -3.0f);
      std::vector<Matrix> h0, h1;
      const Matrix a = logits_of(p, in.tokens, nullptr, &h0);
      const Matrix b = logits_of(p, in.tokens, &bias, &h1);
      const Index u = in.sentinel_positions[doc];
      CHECK(a.topRows(u) == b.topRows(u));
      CHECK_FALSE(a.bottomRows(in.length() - u) == b.bottomRows(in.length() - u));
      for (int l = 0; l <= small_config().filter_layers; ++l) CHECK(h0[l] == h1[l]);
    }
  }

  TEST_CASE("cached decoding matches uncached decoding and full forward logits") {
    auto p = init_model(small_config(), 10);
    for (int trial = 0; trial < 5; ++trial) {
      const auto in = build_input(small_sample(300 + trial), BuildMode::kInfer, 128);
      std::vector<float> levels(in.document_count(), 0.0f);
      levels[0] = -1.5f;
      const DocumentBias bias = DocumentBias::from_input(in, levels);
      const auto cached = generate(p, in, &bias, 4);
      const auto plain = generate_uncached(p, in, &bias, 4);
      CHECK(cached.tokens == plain.tokens);
      CHECK(cached.truncated == plain.truncated);

      InferenceSession s(p, &bias);
      const Vector last = s.append(in.tokens);
      const Matrix dense = bias.dense(in.length());
      const Matrix full = logits_of(p, in.tokens, &dense);
      CHECK((last.transpose() - full.row(in.length() - 1)).cwiseAbs().maxCoeff() < 1e-4f);
    }
  }

  TEST_CASE("generation limits") {
    auto p = init_model(small_config(), 11);
    const auto in = build_input(small_sample(5), BuildMode::kInfer, 128);
    CHECK(generate(p, in, nullptr, 0).tokens.empty());
    auto tight = small_config();
    tight.max_context = in.length() + 1;
    auto q = init_model(tight, 11);
    const auto g = generate(q, in, nullptr, 5);
    CHECK(g.truncated);
    // One slot left: the second token is predicted from a full context.
    CHECK(g.tokens.size() <= 2);
  }

  TEST_CASE("attention share of a uniform-attention model follows span lengths") {
    auto p = init_model(small_config(), 12);
    for (auto& layer : p.layers) {
      layer.wq.value().setZero();
      layer.wk.value().setZero();
    }
    const auto in = build_input(small_sample(6), BuildMode::kInfer, 128);
    const auto share = attention_share(p, in, nullptr);
    const double keys = static_cast<double>(in.answer_start);
    for (size_t i = 0; i < in.document_count(); ++i) {
      CHECK(share.per_document[i] == doctest::Approx(in.masked_columns(i).length() / keys).epsilon(1e-5));
    }
    std::vector<float> levels(in.document_count(), 0.0f);
    levels[2] = -1e9f;
    const auto bias = DocumentBias::from_input(in, levels);
    CHECK(attention_share(p, in, &bias).per_document[2] < 1e-6);
  }

  TEST_CASE("checkpoint round trip and shape mismatch") {
    const auto p = init_model(small_config(), 13);
    Checkpoint ck;
    append_to_checkpoint(p, ck);
    const auto back = model_from_checkpoint(small_config(), decode_checkpoint(encode_checkpoint(ck)));
    const auto a = p.parameters();
    const auto b = back.parameters();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value() == b[i]->value());
    auto other = small_config();
    other.d_model = 32;
    CHECK_THROWS_AS(model_from_checkpoint(other, ck), CheckpointError);
  }

  TEST_CASE("forward can resume from an intermediate layer") {
    auto p = init_model(small_config(), 14);
    const auto in = build_input(small_sample(7), BuildMode::kTrain, 128);
    Graph<float> g;
    ForwardRequest<float> first;
    first.tokens = in.tokens;
    first.stop_layer = 2;
    auto head = forward(g, p, first);
    CHECK_FALSE(head.logits.has_value());
    ForwardRequest<float> rest;
    rest.tokens = in.tokens;
    rest.start_layer = 2;
    rest.resume_from = head.hidden.back();
    const Matrix resumed = forward(g, p, rest).logits->value();
    CHECK(resumed == logits_of(p, in.tokens));
  }
}
