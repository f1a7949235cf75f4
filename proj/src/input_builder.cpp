#include "fltlm/input_builder.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace fltlm {

std::vector<int> QASample::labels() const {
  std::vector<int> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(d.relevant ? 1 : 0);
  return out;
}

size_t QASample::relevant_count() const {
  return static_cast<size_t>(std::count_if(documents.begin(), documents.end(), [](const auto& d) { return d.relevant; }));
}

Span SegmentedInput::masked_columns(size_t i) const {
  const Span& s = doc_spans.at(i);
  return kMaskCoversSentinel ? Span{s.begin, sentinel_positions[i] + 1} : s;
}

std::vector<int> SegmentedInput::next_token_targets() const {
  std::vector<int> out(tokens.size(), 0);
  for (size_t t = 0; t + 1 < tokens.size(); ++t) out[t] = tokens[t + 1];
  return out;
}

std::vector<bool> SegmentedInput::loss_rows() const {
  std::vector<bool> out(tokens.size(), false);
  for (size_t t = 0; t + 1 < tokens.size(); ++t) out[t] = answer_mask[t + 1];
  return out;
}

namespace {

void append(std::vector<int>& out, const std::vector<int>& more) { out.insert(out.end(), more.begin(), more.end()); }

std::vector<int> header_tokens(const QASample& sample, const Vocabulary& vocab) {
  std::vector<int> out = vocab.tokenize(kPromptText);
  out.push_back(vocab.id(kQuestionMarker));
  append(out, vocab.tokenize(sample.question));
  return out;
}

std::vector<int> document_tokens(const QASample& sample, size_t i, const Vocabulary& vocab) {
  auto toks = vocab.tokenize(sample.documents[i].text);
  if (toks.empty()) throw std::invalid_argument("document " + std::to_string(i + 1) + " of " + sample.id + " is empty");
  for (int t : toks) {
    if (vocab.is_reserved(t)) throw std::invalid_argument("document text contains reserved token " + vocab.word(t));
  }
  return toks;
}

}  // namespace

SegmentedInput build_input(const QASample& sample, BuildMode mode, Index max_context, const Vocabulary& vocab) {
  if (sample.documents.size() > static_cast<size_t>(Vocabulary::kMaxDocuments)) {
    throw std::invalid_argument("sample " + sample.id + " has more documents than sentinels");
  }
  SegmentedInput in;
  const auto header = header_tokens(sample, vocab);
  append(in.tokens, header);
  in.reference_position = static_cast<Index>(in.tokens.size()) - 1;
  for (size_t i = 0; i < sample.documents.size(); ++i) {
    const auto body = document_tokens(sample, i, vocab);
    const Index l = static_cast<Index>(in.tokens.size());
    append(in.tokens, body);
    const Index p = static_cast<Index>(in.tokens.size());
    in.tokens.push_back(vocab.sentinel(static_cast<int>(i) + 1));
    in.doc_spans.push_back({l, p});
    in.sentinel_positions.push_back(p);
    in.relevance_labels.push_back(sample.documents[i].relevant ? 1 : 0);
  }
  append(in.tokens, header);
  in.tokens.push_back(vocab.answer_delimiter());
  in.answer_start = static_cast<Index>(in.tokens.size());
  in.answer_mask.assign(in.tokens.size(), false);
  if (mode == BuildMode::kTrain) {
    const auto answer = vocab.tokenize(sample.answer);
    if (answer.empty()) throw std::invalid_argument("sample " + sample.id + " has an empty answer");
    append(in.tokens, answer);
    in.answer_mask.resize(in.tokens.size(), true);
  }
  if (in.length() > max_context) throw ContextOverflow(in.length(), max_context);
  return in;
}

SegmentedInput build_pair_input(const QASample& sample, size_t doc, Index max_context, const Vocabulary& vocab) {
  SegmentedInput in;
  append(in.tokens, header_tokens(sample, vocab));
  in.reference_position = static_cast<Index>(in.tokens.size()) - 1;
  const Index l = in.length();
  append(in.tokens, document_tokens(sample, doc, vocab));
  const Index p = in.length();
  in.tokens.push_back(vocab.sentinel(1));
  in.doc_spans.push_back({l, p});
  in.sentinel_positions.push_back(p);
  in.relevance_labels.push_back(sample.documents.at(doc).relevant ? 1 : 0);
  in.answer_start = in.length();
  in.answer_mask.assign(in.tokens.size(), false);
  if (in.length() > max_context) throw ContextOverflow(in.length(), max_context);
  return in;
}

QASample reorder_sample(const QASample& sample) {
  const size_t k = sample.relevant_count();
  if (k == 0) throw std::invalid_argument("reorder_sample: sample " + sample.id + " has no relevant document");
  const size_t front_count = (k + 1) / 2;
  std::vector<size_t> front, middle, back;
  size_t seen = 0;
  for (size_t i = 0; i < sample.documents.size(); ++i) {
    if (!sample.documents[i].relevant) {
      middle.push_back(i);
    } else if (seen++ < front_count) {
      front.push_back(i);
    } else {
      back.push_back(i);
    }
  }
  std::vector<size_t> order = front;
  order.insert(order.end(), middle.begin(), middle.end());
  order.insert(order.end(), back.begin(), back.end());
  return permute_documents(sample, order);
}

QASample permute_documents(const QASample& sample, std::span<const size_t> order) {
  if (order.size() != sample.documents.size()) throw std::invalid_argument("permute_documents: order size mismatch");
  QASample out = sample;
  for (size_t j = 0; j < order.size(); ++j) out.documents[j] = sample.documents.at(order[j]);
  return out;
}

std::string sample_to_json_line(const QASample& sample) {
  nlohmann::ordered_json j;
  j["id"] = sample.id;
  j["question"] = sample.question;
  j["documents"] = nlohmann::ordered_json::array();
  for (const auto& d : sample.documents) j["documents"].push_back({{"text", d.text}, {"label", d.relevant ? 1 : 0}});
  j["answer"] = sample.answer;
  return j.dump();
}

QASample sample_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  QASample s;
  s.id = j.at("id").get<std::string>();
  s.question = j.at("question").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  for (const auto& d : j.at("documents")) {
    s.documents.push_back({d.at("text").get<std::string>(), d.at("label").get<int>() != 0});
  }
  return s;
}

void write_dataset(const std::filesystem::path& path, std::span<const QASample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) out << sample_to_json_line(s) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<QASample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<QASample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fltlm
