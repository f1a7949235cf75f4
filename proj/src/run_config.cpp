#include "fltlm/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace fltlm {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const ModelConfig& c) {
  return ordered_json{{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
                      {"n_heads", c.n_heads},           {"total_layers", c.total_layers},
                      {"filter_layers", c.filter_layers}, {"max_context", c.max_context},
                      {"rotary", c.rotary},             {"ffn_multiplier", c.ffn_multiplier}};
}

ordered_json to_json(const GenConfig& c) {
  return ordered_json{{"n_docs", c.n_docs},
                      {"hops", c.hops},
                      {"facts_per_doc", c.facts_per_doc},
                      {"entity_count", c.entity_count},
                      {"relation_count", c.relation_count},
                      {"answer_length", c.answer_length},
                      {"distractors", to_string(c.style)},
                      {"seed", c.seed},
                      {"train_size", c.train_size},
                      {"eval_size", c.eval_size}};
}

ordered_json to_json(const TrainConfig& c) {
  return ordered_json{{"regime", to_string(c.regime)},
                      {"lambda", c.lambda},
                      {"mu", c.mu},
                      {"strategy", to_string(c.strategy)},
                      {"margin", c.margin.to_string()},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"backbone_lr", c.backbone_lr},
                      {"head_lr", c.head_lr},
                      {"lr_multiplier", c.lr_multiplier},
                      {"warmup_ratio", c.warmup_ratio},
                      {"weight_decay", c.weight_decay},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"adam_eps", c.adam_eps},
                      {"grad_clip", c.grad_clip},
                      {"seed", c.seed},
                      {"probe_every", c.probe_every}};
}

ordered_json to_json(const RunConfig& c) {
  return ordered_json{{"seed", c.seed},
                      {"paths",
                       {{"data", c.data_dir.string()},
                        {"checkpoints", c.checkpoint_dir.string()},
                        {"reports", c.report_dir.string()}}},
                      {"model", to_json(c.model)},
                      {"data", to_json(c.data)},
                      {"train", to_json(c.train)}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* section) {
  if (!j.is_object()) throw std::invalid_argument(std::string("config section '") + section + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.contains(it.key())) {
      throw std::invalid_argument(std::string("unknown key '") + it.key() + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  reject_unknown(j, {"vocab_size", "d_model", "n_heads", "total_layers", "filter_layers", "max_context", "rotary",
                     "ffn_multiplier"},
                 "model");
  read(j, "vocab_size", c.vocab_size);
  read(j, "d_model", c.d_model);
  read(j, "n_heads", c.n_heads);
  read(j, "total_layers", c.total_layers);
  if (j.contains("total_layers") && !j.contains("filter_layers")) c.filter_layers = c.total_layers / 2;
  read(j, "filter_layers", c.filter_layers);
  read(j, "max_context", c.max_context);
  read(j, "rotary", c.rotary);
  read(j, "ffn_multiplier", c.ffn_multiplier);
  c.validate();
  return c;
}

GenConfig gen_config_from_json(const json& j, GenConfig c) {
  reject_unknown(j, {"n_docs", "hops", "facts_per_doc", "entity_count", "relation_count", "answer_length",
                     "distractors", "seed", "train_size", "eval_size"},
                 "data");
  read(j, "n_docs", c.n_docs);
  read(j, "hops", c.hops);
  read(j, "facts_per_doc", c.facts_per_doc);
  read(j, "entity_count", c.entity_count);
  read(j, "relation_count", c.relation_count);
  read(j, "answer_length", c.answer_length);
  if (j.contains("distractors")) c.style = parse_distractor_style(j.at("distractors").get<std::string>());
  read(j, "seed", c.seed);
  read(j, "train_size", c.train_size);
  read(j, "eval_size", c.eval_size);
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j, {"regime", "lambda", "mu", "strategy", "margin", "batch_size", "epochs", "backbone_lr", "head_lr",
                     "lr_multiplier", "warmup_ratio", "weight_decay", "beta1", "beta2", "adam_eps", "grad_clip", "seed",
                     "probe_every"},
                 "train");
  if (j.contains("regime")) c.regime = parse_regime(j.at("regime").get<std::string>());
  read(j, "lambda", c.lambda);
  read(j, "mu", c.mu);
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("margin")) c.margin = MarginSetting::parse(j.at("margin").get<std::string>());
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "backbone_lr", c.backbone_lr);
  read(j, "head_lr", c.head_lr);
  read(j, "lr_multiplier", c.lr_multiplier);
  read(j, "warmup_ratio", c.warmup_ratio);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "grad_clip", c.grad_clip);
  read(j, "seed", c.seed);
  read(j, "probe_every", c.probe_every);
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  reject_unknown(j, {"seed", "paths", "model", "data", "train"}, "root");
  read(j, "seed", c.seed);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown(p, {"data", "checkpoints", "reports"}, "paths");
    if (p.contains("data")) c.data_dir = p.at("data").get<std::string>();
    if (p.contains("checkpoints")) c.checkpoint_dir = p.at("checkpoints").get<std::string>();
    if (p.contains("reports")) c.report_dir = p.at("reports").get<std::string>();
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("data")) c.data = gen_config_from_json(j.at("data"), c.data);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open run config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("run config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string dump_compact(const RunConfig& c) { return to_json(c).dump(); }

}  // namespace fltlm
