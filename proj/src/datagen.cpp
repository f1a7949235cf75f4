#include "fltlm/datagen.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace fltlm {

DistractorStyle parse_distractor_style(std::string_view name) {
  if (name == "random") return DistractorStyle::kRandom;
  if (name == "near-miss" || name == "near_miss") return DistractorStyle::kNearMiss;
  throw std::invalid_argument("unknown distractor style '" + std::string(name) + "' (expected random or near-miss)");
}

std::string to_string(DistractorStyle style) { return style == DistractorStyle::kRandom ? "random" : "near-miss"; }

void GenConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("data config: " + msg); };
  if (hops < 1 || hops > 3) fail("hops must be 1, 2 or 3");
  if (n_docs < hops || n_docs > Vocabulary::kMaxDocuments) {
    fail("n_docs must lie in [hops, " + std::to_string(Vocabulary::kMaxDocuments) + "]");
  }
  if (facts_per_doc < 1) fail("facts_per_doc must be positive");
  const int available = static_cast<int>(Vocabulary::standard().entities().size());
  if (entity_count < 0 || entity_count > available) {
    fail("entity_count must lie in [0, " + std::to_string(available) + "]");
  }
  if (relation_count < 2 || relation_count > Vocabulary::kRelations) {
    fail("relation_count must lie in [2, " + std::to_string(Vocabulary::kRelations) + "]");
  }
  if (answer_length < 1) fail("answer_length must be positive");
}

namespace {

std::span<const int> entity_pool(const GenConfig& cfg) {
  auto all = Vocabulary::standard().entities();
  return cfg.entity_count == 0 ? all : all.first(static_cast<size_t>(cfg.entity_count));
}

template <typename T>
const T& pick(std::span<const T> pool, std::mt19937_64& rng) {
  std::uniform_int_distribution<size_t> dist(0, pool.size() - 1);
  return pool[dist(rng)];
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Fact {
  std::vector<int> words;
};

std::string join_words(const std::vector<Fact>& facts) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> ids;
  for (const auto& f : facts) ids.insert(ids.end(), f.words.begin(), f.words.end());
  return vocab.detokenize(ids);
}

}  // namespace

std::vector<int> start_entities(const GenConfig& cfg, Split split) {
  auto pool = entity_pool(cfg);
  std::vector<int> out;
  for (size_t i = 0; i < pool.size(); ++i) {
    const bool eval = i % 10 == 0;
    if (eval == (split == Split::kEval)) out.push_back(pool[i]);
  }
  return out;
}

QASample generate_sample(const GenConfig& cfg, std::mt19937_64& rng, std::span<const int> starts, std::string id) {
  cfg.validate();
  if (starts.empty()) throw std::invalid_argument("vocabulary exhausted: no start entities");
  const auto& vocab = Vocabulary::standard();
  auto entities = entity_pool(cfg);
  auto relations = Vocabulary::standard().relations().first(static_cast<size_t>(cfg.relation_count));

  const int start = pick(starts, rng);
  std::vector<int> chain_rel(relations.begin(), relations.end());
  std::shuffle(chain_rel.begin(), chain_rel.end(), rng);
  if (static_cast<int>(chain_rel.size()) < cfg.hops) throw std::invalid_argument("vocabulary exhausted: relations");
  chain_rel.resize(static_cast<size_t>(cfg.hops));

  // Chain nodes: start, hops - 1 bridges, then the answer words.
  std::vector<int> others;
  for (int e : entities) {
    if (e != start) others.push_back(e);
  }
  const size_t chain_needed = static_cast<size_t>(cfg.hops - 1 + cfg.answer_length);
  if (others.size() < chain_needed + 2) throw std::invalid_argument("vocabulary exhausted: entities");
  std::shuffle(others.begin(), others.end(), rng);
  std::vector<int> bridges(others.begin(), others.begin() + (cfg.hops - 1));
  std::vector<int> answer(others.begin() + (cfg.hops - 1), others.begin() + static_cast<long>(chain_needed));
  std::vector<int> fillers(others.begin() + static_cast<long>(chain_needed), others.end());
  std::sort(fillers.begin(), fillers.end());
  const std::span<const int> filler_pool(fillers);
  const std::span<const int> rel_pool(relations);

  auto random_fact = [&]() { return Fact{{pick(filler_pool, rng), pick(rel_pool, rng), pick(filler_pool, rng)}}; };
  auto near_miss_fact = [&]() {
    std::bernoulli_distribution coin(0.5);
    if (coin(rng)) {
      int r = pick(rel_pool, rng);
      while (r == chain_rel[0]) r = pick(rel_pool, rng);
      return Fact{{start, r, pick(filler_pool, rng)}};
    }
    const int r = chain_rel[std::uniform_int_distribution<size_t>(0, chain_rel.size() - 1)(rng)];
    return Fact{{pick(filler_pool, rng), r, pick(filler_pool, rng)}};
  };

  QASample sample;
  sample.id = std::move(id);
  std::vector<int> question{vocab.id("what")};
  question.insert(question.end(), chain_rel.begin(), chain_rel.end());
  question.push_back(vocab.id("of"));
  question.push_back(start);
  sample.question = vocab.detokenize(question);
  sample.answer = vocab.detokenize(answer);

  std::uniform_int_distribution<int> slot_dist(0, cfg.facts_per_doc - 1);
  for (int j = 0; j < cfg.hops; ++j) {
    Fact chain;
    chain.words.push_back(j == 0 ? start : bridges[static_cast<size_t>(j - 1)]);
    chain.words.push_back(chain_rel[static_cast<size_t>(j)]);
    if (j + 1 < cfg.hops) {
      chain.words.push_back(bridges[static_cast<size_t>(j)]);
    } else {
      chain.words.insert(chain.words.end(), answer.begin(), answer.end());
    }
    std::vector<Fact> facts;
    for (int f = 0; f + 1 < cfg.facts_per_doc; ++f) facts.push_back(random_fact());
    // Multi-word answers go last so that the object ends at the document boundary.
    const bool last = j + 1 == cfg.hops && cfg.answer_length > 1;
    const int slot = last ? cfg.facts_per_doc - 1 : slot_dist(rng);
    facts.insert(facts.begin() + slot, chain);
    sample.documents.push_back({join_words(facts), true});
  }
  for (int d = cfg.hops; d < cfg.n_docs; ++d) {
    std::vector<Fact> facts;
    for (int f = 0; f < cfg.facts_per_doc; ++f) facts.push_back(random_fact());
    if (cfg.style == DistractorStyle::kNearMiss) facts[static_cast<size_t>(slot_dist(rng))] = near_miss_fact();
    sample.documents.push_back({join_words(facts), false});
  }
  std::shuffle(sample.documents.begin(), sample.documents.end(), rng);
  return sample;
}

std::vector<QASample> generate_split(const GenConfig& cfg, Split split, size_t count) {
  cfg.validate();
  const auto starts = start_entities(cfg, split);
  const char* prefix = split == Split::kTrain ? "train-" : "eval-";
  const std::uint64_t tag = split == Split::kTrain ? 0x7261696eULL : 0x6576616cULL;
  std::vector<QASample> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(splitmix64(splitmix64(cfg.seed ^ (tag << 32)) + i));
    char id[32];
    std::snprintf(id, sizeof id, "%s%06zu", prefix, i);
    out.push_back(generate_sample(cfg, rng, starts, id));
  }
  return out;
}

Corpus generate_corpus(const GenConfig& cfg) {
  return {generate_split(cfg, Split::kTrain, cfg.train_size), generate_split(cfg, Split::kEval, cfg.eval_size)};
}

AblationInputs make_ablation_inputs(const QASample& sample) {
  AblationInputs out{sample, sample, sample};
  out.pos_only.documents.clear();
  out.neg_only.documents.clear();
  for (const auto& d : sample.documents) (d.relevant ? out.pos_only : out.neg_only).documents.push_back(d);
  if (out.pos_only.documents.empty() || out.neg_only.documents.empty()) {
    throw std::invalid_argument("sample " + sample.id + " needs both relevant and irrelevant documents");
  }
  out.pos_only.id += "#pos";
  out.neg_only.id += "#neg";
  return out;
}

CorpusStats corpus_stats(std::span<const QASample> samples, Index max_context) {
  CorpusStats st;
  st.samples = samples.size();
  if (samples.empty()) return st;
  double tokens = 0.0, relevant = 0.0;
  st.min_relevant = samples.front().relevant_count();
  for (const auto& s : samples) {
    const auto in = build_input(s, BuildMode::kTrain, max_context);
    tokens += static_cast<double>(in.length());
    st.max_tokens = std::max(st.max_tokens, in.length());
    const size_t k = s.relevant_count();
    relevant += static_cast<double>(k);
    st.min_relevant = std::min(st.min_relevant, k);
    st.max_relevant = std::max(st.max_relevant, k);
  }
  st.mean_tokens = tokens / static_cast<double>(samples.size());
  st.mean_relevant = relevant / static_cast<double>(samples.size());
  return st;
}

}  // namespace fltlm
