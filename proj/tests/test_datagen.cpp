#include "fltlm/datagen.hpp"

#include <doctest.h>

#include <algorithm>
#include <optional>
#include <set>
#include <sstream>

using namespace fltlm;

namespace {

std::vector<std::string> words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

struct Question {
  std::vector<std::string> relations;
  std::string start;
};

Question parse_question(const std::string& q) {
  const auto w = words(q);
  Question out;
  out.start = w.back();
  for (size_t i = 1; i + 2 < w.size(); ++i) out.relations.push_back(w[i]);
  return out;
}

bool is_relation(const std::string& w) { return w.size() == 3 && w[0] == 'r'; }

/// Rule-based reader: follows subject -relation-> object through the given
/// documents. An object runs until the next "subject relation" pair.
std::optional<std::string> solve(const QASample& s, bool relevant_only, int answer_length) {
  const Question q = parse_question(s.question);
  std::string current = q.start;
  for (size_t hop = 0; hop < q.relations.size(); ++hop) {
    const bool last = hop + 1 == q.relations.size();
    std::optional<std::string> next;
    for (const auto& d : s.documents) {
      if (relevant_only && !d.relevant) continue;
      const auto w = words(d.text);
      for (size_t i = 0; i + 2 < w.size() + 0; ++i) {
        if (w[i] != current || w[i + 1] != q.relations[hop] || !is_relation(w[i + 1])) continue;
        const int take = last ? answer_length : 1;
        if (i + 2 + static_cast<size_t>(take) > w.size()) continue;
        std::string obj;
        for (int k = 0; k < take; ++k) obj += (k ? " " : "") + w[i + 2 + static_cast<size_t>(k)];
        next = obj;
      }
    }
    if (!next) return std::nullopt;
    current = *next;
  }
  return current;
}

GenConfig config(int hops, DistractorStyle style = DistractorStyle::kNearMiss) {
  GenConfig c;
  c.hops = hops;
  c.n_docs = 8;
  c.facts_per_doc = 4;
  c.style = style;
  return c;
}

}  // namespace

TEST_SUITE("datagen") {
  TEST_CASE("config validation") {
    GenConfig c;
    CHECK_NOTHROW(c.validate());
    c.hops = 4;
    CHECK_THROWS(c.validate());
    c = GenConfig{};
    c.n_docs = 17;
    CHECK_THROWS(c.validate());
    c = GenConfig{};
    c.hops = 3;
    c.n_docs = 2;
    CHECK_THROWS(c.validate());
    CHECK(parse_distractor_style("near-miss") == DistractorStyle::kNearMiss);
    CHECK(parse_distractor_style(to_string(DistractorStyle::kRandom)) == DistractorStyle::kRandom);
  }

  TEST_CASE("property: every sample is answerable from its relevant documents") {
    for (int hops : {1, 2, 3}) {
      for (auto style : {DistractorStyle::kRandom, DistractorStyle::kNearMiss}) {
        const auto cfg = config(hops, style);
        for (const auto& s : generate_split(cfg, Split::kTrain, 300)) {
          CHECK(s.relevant_count() == static_cast<size_t>(hops));
          CHECK(s.documents.size() == 8);
          CHECK(solve(s, true, cfg.answer_length) == s.answer);
          CHECK(solve(s, false, cfg.answer_length) == s.answer);
        }
      }
    }
  }

  TEST_CASE("multi-word answers are answerable") {
    auto cfg = config(2);
    cfg.answer_length = 3;
    for (const auto& s : generate_split(cfg, Split::kEval, 200)) {
      CHECK(words(s.answer).size() == 3);
      CHECK(solve(s, true, 3) == s.answer);
    }
  }

  TEST_CASE("single hop: one relevant document containing the answer") {
    for (const auto& s : generate_split(config(1), Split::kTrain, 200)) {
      REQUIRE(s.relevant_count() == 1);
      for (const auto& d : s.documents) {
        const auto w = words(d.text);
        const bool has = std::find(w.begin(), w.end(), s.answer) != w.end();
        CHECK(has == d.relevant);
      }
    }
  }

  TEST_CASE("two hops: the fact about the start entity never contains the answer") {
    for (const auto& s : generate_split(config(2), Split::kTrain, 300)) {
      const Question q = parse_question(s.question);
      for (const auto& d : s.documents) {
        if (!d.relevant) continue;
        const auto w = words(d.text);
        bool about_start = false;
        for (size_t i = 0; i + 1 < w.size(); ++i) about_start |= w[i] == q.start && w[i + 1] == q.relations[0];
        if (about_start) CHECK(std::find(w.begin(), w.end(), s.answer) == w.end());
      }
    }
  }

  TEST_CASE("property: near-miss distractors touch the question but never complete the chain") {
    for (int hops : {1, 2}) {
      for (const auto& s : generate_split(config(hops), Split::kTrain, 300)) {
        const Question q = parse_question(s.question);
        QASample distractors = s;
        std::erase_if(distractors.documents, [](const Document& d) { return d.relevant; });
        for (auto& d : distractors.documents) d.relevant = true;
        CHECK_FALSE(solve(distractors, true, 1).has_value());
        for (const auto& d : distractors.documents) {
          const auto w = words(d.text);
          bool touches = std::find(w.begin(), w.end(), q.start) != w.end();
          for (const auto& r : q.relations) touches |= std::find(w.begin(), w.end(), r) != w.end();
          CHECK(touches);
        }
      }
    }
  }

  TEST_CASE("random distractors never mention the start entity") {
    for (const auto& s : generate_split(config(1, DistractorStyle::kRandom), Split::kTrain, 200)) {
      const Question q = parse_question(s.question);
      for (const auto& d : s.documents) {
        if (d.relevant) continue;
        const auto w = words(d.text);
        CHECK(std::find(w.begin(), w.end(), q.start) == w.end());
      }
    }
  }

  TEST_CASE("determinism and split disjointness") {
    GenConfig cfg = config(2);
    cfg.train_size = 300;
    cfg.eval_size = 100;
    const Corpus a = generate_corpus(cfg);
    const Corpus b = generate_corpus(cfg);
    CHECK(a.train == b.train);
    CHECK(a.eval == b.eval);
    cfg.seed = 2;
    CHECK_FALSE(generate_corpus(cfg).train == a.train);

    const auto tr = start_entities(cfg, Split::kTrain);
    const auto ev = start_entities(cfg, Split::kEval);
    std::set<int> train_set(tr.begin(), tr.end());
    for (int e : ev) CHECK_FALSE(train_set.contains(e));
    std::set<std::string> train_q, eval_q;
    for (const auto& s : a.train) train_q.insert(parse_question(s.question).start);
    for (const auto& s : a.eval) eval_q.insert(parse_question(s.question).start);
    for (const auto& e : eval_q) CHECK_FALSE(train_q.contains(e));
  }

  TEST_CASE("relevant positions are spread over all slots") {
    std::vector<int> counts(8, 0);
    for (const auto& s : generate_split(config(1), Split::kTrain, 800)) {
      for (size_t i = 0; i < s.documents.size(); ++i) counts[i] += s.documents[i].relevant;
    }
    for (int c : counts) CHECK(c > 50);
  }

  TEST_CASE("ablation inputs") {
    for (const auto& s : generate_split(config(2), Split::kTrain, 100)) {
      const auto ab = make_ablation_inputs(s);
      CHECK(ab.pos_and_neg == s);
      CHECK(ab.pos_only.documents.size() == 2);
      for (const auto& d : ab.pos_only.documents) CHECK(d.relevant);
      for (const auto& d : ab.neg_only.documents) {
        CHECK_FALSE(d.relevant);
        const auto w = words(d.text);
        CHECK(std::find(w.begin(), w.end(), s.answer) == w.end());
      }
      // Bridge entity: object of the start fact inside the relevant documents.
      QASample first_hop = s;
      const Question q = parse_question(s.question);
      first_hop.question = "what " + q.relations[0] + " of " + q.start;
      const auto bridge = solve(first_hop, true, 1);
      REQUIRE(bridge.has_value());
      for (const auto& d : ab.neg_only.documents) {
        const auto w = words(d.text);
        CHECK(std::find(w.begin(), w.end(), *bridge) == w.end());
      }
    }
    QASample all_pos = generate_split(config(1), Split::kTrain, 1).front();
    for (auto& d : all_pos.documents) d.relevant = true;
    CHECK_THROWS(make_ablation_inputs(all_pos));
  }

  TEST_CASE("corpus statistics") {
    const auto data = generate_split(config(2), Split::kTrain, 50);
    const auto st = corpus_stats(data, 512);
    CHECK(st.samples == 50);
    CHECK(st.min_relevant == 2);
    CHECK(st.max_relevant == 2);
    CHECK(st.mean_tokens > 0.0);
    CHECK(st.max_tokens <= 512);
  }
}
