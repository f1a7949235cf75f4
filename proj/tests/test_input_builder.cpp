#include "fltlm/datagen.hpp"
#include "fltlm/softmask.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace fltlm;

namespace {

QASample sample_with_labels(const std::vector<int>& labels) {
  QASample s;
  s.id = "t";
  s.question = "what r01 of e001";
  for (size_t i = 0; i < labels.size(); ++i) {
    s.documents.push_back({"e00" + std::to_string(i + 2) + " r02 e010", labels[i] == 1});
  }
  s.answer = "e010";
  return s;
}

std::vector<int> label_pattern(const QASample& s) {
  std::vector<int> out;
  for (const auto& d : s.documents) out.push_back(d.relevant ? 1 : 0);
  return out;
}

std::vector<QASample> corpus(size_t n, int hops = 1) {
  GenConfig cfg;
  cfg.hops = hops;
  cfg.n_docs = 6;
  cfg.facts_per_doc = 3;
  return generate_split(cfg, Split::kTrain, n);
}

}  // namespace

TEST_SUITE("input_builder") {
  TEST_CASE("single document layout") {
    QASample s = sample_with_labels({1});
    const auto in = build_input(s, BuildMode::kTrain, 512);
    REQUIRE(in.doc_spans.size() == 1);
    CHECK(in.sentinel_positions[0] == in.doc_spans[0].end);
    CHECK(in.tokens[static_cast<size_t>(in.sentinel_positions[0])] == Vocabulary::standard().sentinel(1));
    CHECK(std::count(in.answer_mask.begin(), in.answer_mask.end(), true) == 1);
    CHECK(in.relevance_labels == std::vector<int>{1});
    CHECK(in.masked_columns(0) == Span{in.doc_spans[0].begin, in.sentinel_positions[0] + 1});
  }

  TEST_CASE("three documents use distinct ascending sentinels") {
    const auto in = build_input(sample_with_labels({0, 1, 0}), BuildMode::kTrain, 512);
    const auto& v = Vocabulary::standard();
    REQUIRE(in.sentinel_positions.size() == 3);
    CHECK(in.sentinel_positions[0] < in.sentinel_positions[1]);
    CHECK(in.sentinel_positions[1] < in.sentinel_positions[2]);
    for (int i = 0; i < 3; ++i) CHECK(in.tokens[static_cast<size_t>(in.sentinel_positions[i])] == v.sentinel(i + 1));
  }

  TEST_CASE("question appears before and after the documents; infer mode has no answer") {
    QASample s = sample_with_labels({1, 0});
    const auto train = build_input(s, BuildMode::kTrain, 512);
    const auto infer = build_input(s, BuildMode::kInfer, 512);
    const auto q = Vocabulary::standard().tokenize(s.question);
    auto first = std::search(infer.tokens.begin(), infer.tokens.end(), q.begin(), q.end());
    REQUIRE(first != infer.tokens.end());
    CHECK(first - infer.tokens.begin() < infer.doc_spans[0].begin);
    auto second = std::search(first + 1, infer.tokens.end(), q.begin(), q.end());
    REQUIRE(second != infer.tokens.end());
    CHECK(second - infer.tokens.begin() > infer.sentinel_positions.back());
    CHECK(infer.tokens.back() == Vocabulary::standard().answer_delimiter());
    CHECK(std::none_of(infer.answer_mask.begin(), infer.answer_mask.end(), [](bool b) { return b; }));
    CHECK(infer.answer_start == infer.length());
    CHECK(train.length() == infer.length() + 1);
    CHECK(train.tokens[static_cast<size_t>(train.answer_start)] == Vocabulary::standard().id(s.answer));
  }

  TEST_CASE("overlong input reports the measured length") {
    QASample s = sample_with_labels({1, 0, 0});
    const auto full = build_input(s, BuildMode::kTrain, 512);
    try {
      build_input(s, BuildMode::kTrain, full.length() - 1);
      FAIL("expected ContextOverflow");
    } catch (const ContextOverflow& e) {
      CHECK(e.measured_length == full.length());
    }
  }

  TEST_CASE("pair input holds one document") {
    QASample s = sample_with_labels({0, 1, 0});
    const auto in = build_pair_input(s, 1, 512);
    REQUIRE(in.doc_spans.size() == 1);
    CHECK(in.tokens.back() == Vocabulary::standard().sentinel(1));
    CHECK(in.relevance_labels == std::vector<int>{1});
  }

  TEST_CASE("property: every position belongs to exactly one region") {
    for (const auto& s : corpus(300)) {
      const auto in = build_input(s, BuildMode::kTrain, 512);
      std::vector<int> owner(static_cast<size_t>(in.length()), 0);
      for (size_t i = 0; i < in.doc_spans.size(); ++i) {
        CHECK(in.doc_spans[i].begin < in.doc_spans[i].end);
        CHECK(in.doc_spans[i].end <= in.sentinel_positions[i] + 1);
        if (i > 0) CHECK(in.doc_spans[i].begin > in.sentinel_positions[i - 1]);
        for (Index t = in.doc_spans[i].begin; t < in.doc_spans[i].end; ++t) owner[t] += 1;
        owner[static_cast<size_t>(in.sentinel_positions[i])] += 1;
      }
      for (Index t = 0; t < in.length(); ++t) {
        if (in.answer_mask[t]) {
          owner[t] += 1;
          CHECK(t > in.sentinel_positions.back());
        }
      }
      const Index first = in.doc_spans.front().begin;
      const Index last = in.sentinel_positions.back();
      for (Index t = 0; t < in.length(); ++t) {
        const bool prompt = t < first || (t > last && !in.answer_mask[t]);
        CHECK(owner[t] + (prompt ? 1 : 0) == 1);
      }
    }
  }

  TEST_CASE("property: tokenizer round trip over 1000 generated samples") {
    const auto& v = Vocabulary::standard();
    for (const auto& s : corpus(1000, 2)) {
      CHECK(v.detokenize(v.tokenize(s.question)) == s.question);
      CHECK(v.detokenize(v.tokenize(s.answer)) == s.answer);
      const auto in = build_input(s, BuildMode::kTrain, 512);
      for (size_t i = 0; i < s.documents.size(); ++i) {
        const auto& text = s.documents[i].text;
        CHECK(v.detokenize(v.tokenize(text)) == text);
        std::vector<int> span(in.tokens.begin() + in.doc_spans[i].begin, in.tokens.begin() + in.doc_spans[i].end);
        CHECK(v.detokenize(span) == text);
        for (int id : v.tokenize(text)) CHECK_FALSE(v.is_sentinel(id));
      }
    }
  }

  TEST_CASE("tokenizer edge cases") {
    const auto& v = Vocabulary::standard();
    CHECK(v.tokenize("").empty());
    CHECK(v.detokenize(std::vector<int>{}).empty());
    CHECK_THROWS_AS(v.tokenize("e001 zebra"), OutOfVocabulary);
    CHECK(v.size() == Vocabulary::kSize);
    CHECK(v.sentinel(1) != v.sentinel(2));
    CHECK(v.is_sentinel(v.sentinel(16)));
  }

  TEST_CASE("reorder examples") {
    CHECK(label_pattern(reorder_sample(sample_with_labels({0, 1, 0, 1, 0}))) == std::vector<int>{1, 0, 0, 0, 1});
    CHECK(label_pattern(reorder_sample(sample_with_labels({0, 0, 1}))) == std::vector<int>{1, 0, 0});
    CHECK(label_pattern(reorder_sample(sample_with_labels({1, 1, 1}))) == std::vector<int>{1, 1, 1});
    CHECK_THROWS(reorder_sample(sample_with_labels({0, 0})));
  }

  TEST_CASE("reorder keeps relative order of the remaining documents") {
    QASample s = sample_with_labels({0, 1, 0, 1, 0, 1});
    const auto r = reorder_sample(s);
    // Two of three relevant documents go to the front, one to the back.
    CHECK(r.documents[0] == s.documents[1]);
    CHECK(r.documents[1] == s.documents[3]);
    CHECK(r.documents[2] == s.documents[0]);
    CHECK(r.documents[3] == s.documents[2]);
    CHECK(r.documents[4] == s.documents[4]);
    CHECK(r.documents[5] == s.documents[5]);
  }

  TEST_CASE("property: permuting documents permutes labels with them") {
    std::mt19937_64 rng(4);
    for (const auto& s : corpus(200)) {
      std::vector<size_t> order(s.documents.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      const auto p = permute_documents(s, order);
      const auto in = build_input(p, BuildMode::kTrain, 512);
      const auto labels = s.labels();
      for (size_t j = 0; j < order.size(); ++j) {
        CHECK(in.relevance_labels[j] == labels[order[j]]);
        CHECK(p.documents[j].text == s.documents[order[j]].text);
      }
    }
  }

  TEST_CASE("dataset lines round trip") {
    for (const auto& s : corpus(50)) CHECK(sample_from_json_line(sample_to_json_line(s)) == s);
    CHECK_THROWS(sample_from_json_line("{\"id\": 3}"));
  }
}

TEST_SUITE("softmask") {
  TEST_CASE("bias matches the double-loop construction cell by cell") {
    const auto in = build_input(sample_with_labels({1, 0, 0}), BuildMode::kTrain, 512);
    const std::vector<double> levels{0.0, -1.0, -0.25};
    Graph<double> g;
    MatrixX<double> col(3, 1);
    col << levels[0], levels[1], levels[2];
    const auto bias = build_bias(in, g.constant(col), in.length()).value();
    const auto ref = oracle::soft_mask_bias(in, levels, static_cast<size_t>(in.length()));
    CHECK(oracle::max_abs_diff(oracle::to_grid(bias), ref) == 0.0);

    // Rows inside document 2 already see document 1's intensity.
    const Index row_in_doc2 = in.doc_spans[1].begin;
    const Index col_in_doc1 = in.doc_spans[0].begin;
    const std::vector<double> only_first{-2.0, 0.0, 0.0};
    MatrixX<double> c2(3, 1);
    c2 << -2.0, 0.0, 0.0;
    const auto b2 = build_bias(in, g.constant(c2), in.length()).value();
    CHECK(b2(row_in_doc2, col_in_doc1) == -2.0);
    CHECK(b2(in.sentinel_positions[0] - 1, col_in_doc1) == 0.0);
  }

  TEST_CASE("zero intensities give the zero matrix and positive ones are rejected") {
    const auto in = build_input(sample_with_labels({1, 0}), BuildMode::kTrain, 512);
    Graph<double> g;
    CHECK(build_bias(in, g.constant(MatrixX<double>::Zero(2, 1)), in.length()).value().isZero(0.0));
    CHECK_THROWS(build_bias(in, g.constant(MatrixX<double>::Constant(2, 1, 0.5)), in.length()));
    const std::vector<float> bad{0.0f, 0.1f};
    CHECK_THROWS(DocumentBias::from_input(in, bad));
  }

  TEST_CASE("property: structured bias equals dense bias row by row; early rows are zero") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> u(-3.0f, 0.0f);
    for (const auto& s : corpus(50)) {
      const auto in = build_input(s, BuildMode::kTrain, 512);
      std::vector<float> levels;
      for (size_t i = 0; i < in.document_count(); ++i) levels.push_back(u(rng));
      const auto db = DocumentBias::from_input(in, levels);
      const Matrix dense = db.dense(in.length());
      std::vector<double> lv(levels.begin(), levels.end());
      CHECK(oracle::max_abs_diff(oracle::to_grid(dense), oracle::soft_mask_bias(in, lv, in.length())) < 1e-6);
      for (Index r = 0; r < in.length(); ++r) {
        std::vector<float> row(static_cast<size_t>(in.length()), 0.0f);
        db.add_to_row(r, row);
        for (Index c = 0; c < in.length(); ++c) CHECK(row[c] == dense(r, c));
        if (r < in.sentinel_positions.front()) CHECK(dense.row(r).isZero(0.0f));
      }
    }
  }

  TEST_CASE("bias gradient reaches the intensities") {
    const auto in = build_input(sample_with_labels({1, 0}), BuildMode::kTrain, 512);
    BasicParameter<double> lv("I", MatrixX<double>::Constant(2, 1, -0.5));
    std::vector<BasicParameter<double>*> params{&lv};
    MatrixX<double> weights = MatrixX<double>::Random(in.length(), in.length());
    auto f = [&](Graph<double>& g) {
      return sum(hadamard(build_bias(in, g.parameter(lv), in.length()), g.constant(weights)));
    };
    CHECK(finite_diff_check(f, params, 1e-5).max_rel_error < 1e-6);
  }
}
