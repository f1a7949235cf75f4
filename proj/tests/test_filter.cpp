#include "fltlm/datagen.hpp"
#include "fltlm/filter.hpp"
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
  c.max_context = 256;
  c.ffn_multiplier = 2;
  return c;
}

QASample sample_with(int n_docs, std::uint64_t seed) {
  GenConfig g;
  g.n_docs = n_docs;
  g.facts_per_doc = 2;
  g.seed = seed;
  return generate_split(g, Split::kTrain, 1).front();
}

/// Replaces every entity of document j with another entity, keeping its length.
QASample alter_document(QASample s, size_t j, std::mt19937_64& rng) {
  const auto& v = Vocabulary::standard();
  auto ids = v.tokenize(s.documents[j].text);
  const auto ents = v.entities();
  for (int& id : ids) {
    if (std::find(ents.begin(), ents.end(), id) != ents.end()) id = ents[rng() % ents.size()];
  }
  s.documents[j].text = v.detokenize(ids);
  return s;
}

Matrix layer_n(ModelParams& p, const SegmentedInput& in, const Matrix* mask = nullptr) {
  Graph<float> g;
  ForwardRequest<float> req;
  req.tokens = in.tokens;
  req.stop_layer = p.config.filter_layers;
  req.filter_mask = mask;
  return forward(g, p, req).hidden.back().value();
}

Matrix embeddings_for(ModelParams& p, const QASample& s, ExtractionStrategy strategy) {
  const auto in = build_input(s, BuildMode::kTrain, p.config.max_context);
  Graph<float> g;
  const Matrix mask = independent_filter_mask<float>(in);
  const Matrix h = layer_n(p, in, strategy == ExtractionStrategy::kIndependent ? &mask : nullptr);
  return extract_embeddings(g.constant(h), in, strategy, required_masking(strategy)).value();
}

}  // namespace

TEST_SUITE("filter") {
  TEST_CASE("strategy names") {
    for (auto s : {ExtractionStrategy::kPairwise, ExtractionStrategy::kIndependent, ExtractionStrategy::kAccumulative,
                   ExtractionStrategy::kNaive}) {
      CHECK(parse_strategy(to_string(s)) == s);
    }
    CHECK_THROWS(parse_strategy("greedy"));
  }

  TEST_CASE("head initialisation") {
    const auto h = init_filter_head(64, 1);
    CHECK(h.weight.value().rows() == 64);
    CHECK(h.bias.value()(0, 0) == 0.0f);
    CHECK(h.temperature() == 1.0f);
    CHECK(h.margin() == 1.0f);
    CHECK_FALSE(h.log_temperature.trainable);
    CHECK(h.log_margin.trainable);
    const double sd = std::sqrt(h.weight.value().squaredNorm() / 64.0);
    CHECK(sd > 0.01);
    CHECK(sd < 0.03);
    auto fixed = h;
    fixed.fix_margin(0.5f);
    CHECK(fixed.margin() == doctest::Approx(0.5f));
    CHECK_FALSE(fixed.log_margin.trainable);
  }

  TEST_CASE("scoring head is affine") {
    auto head = init_filter_head(8, 2);
    head.bias.value()(0, 0) = 0.25f;
    Graph<float> g;
    const Matrix e = Matrix::Random(10, 8);
    const Matrix s = score(g.constant(e), head).value();
    CHECK(s.rows() == 10);
    const Matrix s2 = score(g.constant(Matrix(3.0f * e)), head).value();
    for (Index i = 0; i < 10; ++i) CHECK(s2(i, 0) - 0.25f == doctest::Approx(3.0f * (s(i, 0) - 0.25f)).epsilon(1e-5));
    head.weight.value().setZero();
    Graph<float> fresh;
    CHECK(score(fresh.constant(e), head).value().isConstant(0.25f));
    CHECK_THROWS_AS(score(g.constant(Matrix::Zero(2, 5)), head), ShapeError);
  }

  TEST_CASE("accumulative first document equals naive minus the reference position") {
    auto p = init_model(small_config(), 3);
    const auto s = sample_with(4, 1);
    const auto in = build_input(s, BuildMode::kTrain, 256);
    const Matrix h = layer_n(p, in);
    const Matrix naive = embeddings_for(p, s, ExtractionStrategy::kNaive);
    const Matrix acc = embeddings_for(p, s, ExtractionStrategy::kAccumulative);
    CHECK(acc.row(0) == naive.row(0) - h.row(in.reference_position));
    for (size_t i = 1; i < in.document_count(); ++i) CHECK(acc.row(i) == naive.row(i) - naive.row(i - 1));
    CHECK(in.reference_position == in.doc_spans[0].begin - 1);
  }

  TEST_CASE("masking mismatch and pairwise misuse are rejected") {
    const auto in = build_input(sample_with(3, 2), BuildMode::kTrain, 256);
    Graph<float> g;
    auto h = g.constant(Matrix::Zero(in.length(), 16));
    CHECK_THROWS(extract_embeddings(h, in, ExtractionStrategy::kIndependent, FilterMasking::kNone));
    CHECK_THROWS(extract_embeddings(h, in, ExtractionStrategy::kNaive, FilterMasking::kIndependent));
    CHECK_THROWS(extract_embeddings(h, in, ExtractionStrategy::kPairwise, FilterMasking::kNone));
  }

  TEST_CASE("property: naive embeddings are causal, independent ones are isolated") {
    auto p = init_model(small_config(), 4);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 15; ++trial) {
      const auto s = sample_with(5, 10 + trial);
      const size_t j = rng() % s.documents.size();
      const auto altered = alter_document(s, j, rng);
      const Matrix ind0 = embeddings_for(p, s, ExtractionStrategy::kIndependent);
      const Matrix ind1 = embeddings_for(p, altered, ExtractionStrategy::kIndependent);
      const Matrix nai0 = embeddings_for(p, s, ExtractionStrategy::kNaive);
      const Matrix nai1 = embeddings_for(p, altered, ExtractionStrategy::kNaive);
      for (size_t i = 0; i < s.documents.size(); ++i) {
        if (i != j) CHECK(ind0.row(i) == ind1.row(i));
        if (i < j) CHECK(nai0.row(i) == nai1.row(i));
      }
    }
  }

  TEST_CASE("independent mask blocks exactly the other documents") {
    const auto in = build_input(sample_with(3, 3), BuildMode::kTrain, 256);
    const Matrix m = independent_filter_mask<float>(in);
    for (Index r = 0; r < in.length(); ++r) {
      for (Index c = 0; c < in.length(); ++c) {
        bool blocked = false;
        for (size_t i = 0; i < 3; ++i) {
          for (size_t j = 0; j < 3; ++j) {
            if (i != j && in.masked_columns(i).contains(r) && in.masked_columns(j).contains(c)) blocked = true;
          }
        }
        CHECK((m(r, c) == -std::numeric_limits<float>::infinity()) == blocked);
        if (!blocked) CHECK(m(r, c) == 0.0f);
      }
    }
  }

  TEST_CASE("pairwise embeddings equal separate single-document passes") {
    auto p = init_model(small_config(), 6);
    const auto s = sample_with(3, 4);
    Graph<float> g;
    const Matrix e = pairwise_embeddings(g, p, s).value();
    REQUIRE(e.rows() == 3);
    for (size_t i = 0; i < 3; ++i) {
      const auto pair = build_pair_input(s, i, 256);
      CHECK(e.row(static_cast<Index>(i)) == layer_n(p, pair).row(pair.length() - 1));
    }
  }

  TEST_CASE("filter_scores returns one score per document for every strategy") {
    auto p = init_model(small_config(), 7);
    auto head = init_filter_head(16, 7);
    const auto s = sample_with(10, 5);
    const auto in = build_input(s, BuildMode::kTrain, 256);
    for (auto strat : {ExtractionStrategy::kPairwise, ExtractionStrategy::kIndependent,
                       ExtractionStrategy::kAccumulative, ExtractionStrategy::kNaive}) {
      Graph<float> g;
      std::optional<Var<float>> hidden;
      const auto sc = filter_scores(g, p, head, s, in, strat, &hidden);
      CHECK(sc.rows() == 10);
      CHECK(sc.value().allFinite());
      REQUIRE(hidden.has_value());
      CHECK(hidden->rows() == in.length());
    }
  }
}
