// fltlm: data generation, training, evaluation and ablation sweeps.

#include "fltlm/evaluator.hpp"
#include "fltlm/grad_suite.hpp"
#include "fltlm/run_config.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace fltlm;

namespace {

/// Relative output paths are placed under $FLTLM_OUTPUT_ROOT when it is set.
fs::path output_path(const fs::path& p) {
  const char* root = std::getenv("FLTLM_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || p.is_absolute()) return p;
  return fs::path(root) / p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::string> audit_header(const RunConfig& cfg, const std::string& command) {
  return {"command=" + command, "seed=" + std::to_string(cfg.seed), "config=" + dump_compact(cfg)};
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
};

RunConfig base_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.data.seed = *f.seed;
    cfg.train.seed = *f.seed;
  }
  return cfg;
}

// ---- gen-data ---------------------------------------------------------------

struct GenFlags {
  CommonFlags common;
  std::string out;
  std::optional<int> hops, n_docs, facts, entities;
  std::optional<size_t> train_size, eval_size;
  std::optional<std::string> distractors;
};

int cmd_gen_data(const GenFlags& f) {
  RunConfig cfg = base_config(f.common);
  if (f.hops) cfg.data.hops = *f.hops;
  if (f.n_docs) cfg.data.n_docs = *f.n_docs;
  if (f.facts) cfg.data.facts_per_doc = *f.facts;
  if (f.entities) cfg.data.entity_count = *f.entities;
  if (f.train_size) cfg.data.train_size = *f.train_size;
  if (f.eval_size) cfg.data.eval_size = *f.eval_size;
  if (f.distractors) cfg.data.style = parse_distractor_style(*f.distractors);
  if (!f.out.empty()) cfg.data_dir = f.out;
  cfg.data.validate();
  const fs::path dir = output_path(cfg.data_dir);
  const Corpus corpus = generate_corpus(cfg.data);
  fs::create_directories(dir);
  write_dataset(dir / "train.jsonl", corpus.train);
  write_dataset(dir / "eval.jsonl", corpus.eval);

  nlohmann::ordered_json manifest = to_json(cfg);
  for (const auto& [name, split] : {std::pair{"train", &corpus.train}, std::pair{"eval", &corpus.eval}}) {
    const CorpusStats st = corpus_stats(*split, cfg.model.max_context);
    manifest["stats"][name] = {{"samples", st.samples},          {"mean_tokens", st.mean_tokens},
                               {"max_tokens", st.max_tokens},    {"mean_relevant", st.mean_relevant},
                               {"min_relevant", st.min_relevant}, {"max_relevant", st.max_relevant}};
    std::printf("%-5s samples=%zu mean_tokens=%.1f max_tokens=%ld relevant=%.2f [%zu..%zu]\n", name, st.samples,
                st.mean_tokens, static_cast<long>(st.max_tokens), st.mean_relevant, st.min_relevant, st.max_relevant);
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainFlags {
  CommonFlags common;
  std::string data;
  std::string out;
  std::optional<std::string> regime, strategy, margin;
  std::optional<double> lambda, mu, proportion, lr_multiplier;
  std::optional<int> epochs, batch_size;
  size_t limit = 0;
  size_t probe = 64;
};

/// Reads the data section recorded by gen-data so evaluation knows the answer length.
void merge_manifest(RunConfig& cfg, const fs::path& data_dir) {
  const fs::path manifest = data_dir / "manifest.json";
  if (!fs::exists(manifest)) return;
  std::ifstream in(manifest);
  const auto j = nlohmann::json::parse(in);
  if (j.contains("data")) cfg.data = gen_config_from_json(j.at("data"));
}

void apply_train_flags(RunConfig& cfg, const TrainFlags& f) {
  if (f.regime) cfg.train.regime = parse_regime(*f.regime);
  if (f.mu) {
    if (cfg.train.regime != Regime::kFilterPlusLm) {
      throw std::invalid_argument("--mu only applies to --regime filter-plus-lm");
    }
    cfg.train.mu = *f.mu;
  }
  if (f.lambda) cfg.train.lambda = *f.lambda;
  if (f.strategy) cfg.train.strategy = parse_strategy(*f.strategy);
  if (f.margin) cfg.train.margin = MarginSetting::parse(*f.margin);
  if (f.proportion) cfg.model.set_filter_proportion(*f.proportion);
  if (f.lr_multiplier) cfg.train.lr_multiplier = *f.lr_multiplier;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (!f.data.empty()) cfg.data_dir = f.data;
  cfg.train.validate();
  cfg.model.validate();
}

struct Datasets {
  std::vector<QASample> train, eval;
};

Datasets load_data(const RunConfig& cfg, size_t train_limit, size_t eval_limit) {
  const fs::path dir = output_path(cfg.data_dir);
  Datasets d;
  d.train = read_dataset(dir / "train.jsonl");
  d.eval = read_dataset(dir / "eval.jsonl");
  if (train_limit > 0 && d.train.size() > train_limit) d.train.resize(train_limit);
  if (eval_limit > 0 && d.eval.size() > eval_limit) d.eval.resize(eval_limit);
  return d;
}

TrainResult train_and_save(const RunConfig& cfg, const Datasets& data, size_t probe, const fs::path& ckpt_path,
                           bool verbose) {
  FltlmParams init = init_fltlm(cfg.model, cfg.train.seed);
  const size_t n_probe = std::min(probe, data.eval.size());
  TrainResult res = train(std::move(init), data.train, std::span(data.eval).first(n_probe), cfg.train,
                          [&](const StepLog& l) {
                            if (!verbose || (l.step % 100 != 0 && std::isnan(l.probe_accuracy))) return;
                            std::printf("step %zu L_lm=%.4f L_flt=%.4f w=%.4f b=%.4f m=%.4f probe=%.3f\n", l.step,
                                        l.lm_loss, l.flt_loss, l.w, l.b, l.margin, l.probe_accuracy);
                            std::fflush(stdout);
                          },
                          [&](int epoch, const FltlmParams& params) {
                            if (cfg.train.epochs < 2 || epoch == cfg.train.epochs) return;
                            fs::path path = ckpt_path;
                            path += ".epoch" + std::to_string(epoch);
                            if (path.has_parent_path()) fs::create_directories(path.parent_path());
                            write_checkpoint(path, to_checkpoint(params, dump_compact(cfg)));
                          });
  const auto header = audit_header(cfg, "train");
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  write_checkpoint(ckpt_path, to_checkpoint(res.params, dump_compact(cfg)));
  fs::path log_path = ckpt_path;
  log_path += ".log.csv";
  write_text(log_path, train_log_csv(res.log, header));
  for (const auto& e : res.events) std::fprintf(stderr, "event: %s\n", e.c_str());
  return res;
}

int cmd_train(const TrainFlags& f) {
  RunConfig cfg = base_config(f.common);
  merge_manifest(cfg, output_path(f.data.empty() ? cfg.data_dir : fs::path(f.data)));
  if (f.common.seed) cfg.train.seed = *f.common.seed;
  apply_train_flags(cfg, f);
  const Datasets data = load_data(cfg, f.limit, 0);
  const fs::path ckpt =
      output_path(f.out.empty() ? cfg.checkpoint_dir / (to_string(cfg.train.regime) + ".ckpt") : fs::path(f.out));
  const TrainResult res = train_and_save(cfg, data, f.probe, ckpt, true);
  const StepLog& last = res.log.back();
  std::printf("trained %zu steps; final L_lm=%.4f L_flt=%.4f w=%.4f b=%.4f m=%.4f\nwrote %s\n", res.total_steps,
              last.lm_loss, last.flt_loss, last.w, last.b, last.margin, ckpt.string().c_str());
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalFlags {
  CommonFlags common;
  std::string data;
  std::vector<std::string> models;
  bool baseline = false;
  std::string filter_ckpt, reader_ckpt;
  std::string conditions = "all";
  bool recall = false;
  bool attention = false;
  std::optional<std::string> strategy;
  std::string out;
  size_t limit = 0;
};

struct LoadedModel {
  std::string name;
  Regime regime = Regime::kSft;
  ExtractionStrategy strategy = ExtractionStrategy::kNaive;
  std::optional<FltlmParams> params;
};

LoadedModel load_model(const std::string& name, const fs::path& path) {
  LoadedModel m;
  m.name = name;
  if (!fs::exists(path)) {
    std::fprintf(stderr, "warning: checkpoint %s for '%s' not found; row skipped\n", path.string().c_str(), name.c_str());
    return m;
  }
  const Checkpoint ckpt = read_checkpoint(path);
  m.params = from_checkpoint(ckpt);
  const auto meta = nlohmann::json::parse(ckpt.metadata);
  if (meta.contains("train")) {
    const TrainConfig tc = train_config_from_json(meta.at("train"));
    m.regime = tc.regime;
    m.strategy = tc.strategy;
  }
  return m;
}

int cmd_eval(const EvalFlags& f) {
  RunConfig cfg = base_config(f.common);
  if (!f.data.empty()) cfg.data_dir = f.data;
  merge_manifest(cfg, output_path(cfg.data_dir));
  const Datasets data = load_data(cfg, 1, f.limit);
  const auto conditions = parse_conditions(f.conditions);

  std::vector<LoadedModel> loaded;
  if (f.baseline) {
    LoadedModel b;
    b.name = "baseline";
    b.params = init_fltlm(cfg.model, cfg.seed);
    loaded.push_back(std::move(b));
  }
  for (const auto& spec : f.models) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--model expects name=path, got '" + spec + "'");
    loaded.push_back(load_model(spec.substr(0, eq), output_path(spec.substr(eq + 1))));
  }
  EvalOptions opts;
  opts.max_new_tokens = cfg.data.answer_length;
  opts.strategy = ExtractionStrategy::kNaive;
  for (const auto& m : loaded) {
    if (m.params && uses_filter(m.regime)) {
      opts.strategy = m.strategy;
      break;
    }
  }
  if (f.strategy) opts.strategy = parse_strategy(*f.strategy);

  std::vector<ModelEntry> entries;
  for (auto& m : loaded) {
    std::optional<ExtractionStrategy> own;
    if (!f.strategy && m.params && uses_filter(m.regime)) own = m.strategy;
    entries.push_back({m.name, m.regime, m.params ? &*m.params : nullptr, own});
  }
  EvalReport report = run_matrix(entries, data.eval, conditions, opts);

  std::optional<LoadedModel> filter, reader;
  if (!f.filter_ckpt.empty() || !f.reader_ckpt.empty()) {
    filter = load_model("filter", output_path(f.filter_ckpt));
    reader = load_model("reader", output_path(f.reader_ckpt));
    EvalOptions two_stage = opts;
    if (!f.strategy) two_stage.strategy = filter->strategy;
    add_two_stage_rows(report, filter->params ? &*filter->params : nullptr, reader->params ? &*reader->params : nullptr,
                       data.eval, conditions, two_stage);
  }

  const fs::path out = output_path(f.out.empty() ? cfg.report_dir : fs::path(f.out));
  const auto header = audit_header(cfg, "eval");
  write_text(out / "eval.csv", report.csv(header));
  std::string summary = report.summary();
  for (const auto& m : entries) {
    const double d = report.reorder_delta(m.name);
    if (!std::isnan(d)) summary += "reorder delta " + m.name + ": " + std::to_string(100.0 * d) + "\n";
  }
  write_text(out / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);

  if (f.recall) {
    for (auto& m : entries) {
      if (m.params == nullptr || !uses_filter(m.regime)) continue;
      EvalOptions own = opts;
      own.strategy = m.strategy.value_or(opts.strategy);
      const RecallCurves curves = recall_curves(*m.params, data.eval, own, cfg.seed);
      write_text(out / ("recall_" + m.name + ".csv"), recall_csv(curves, header));
      std::printf("recall curve for %s: %zu points\n", m.name.c_str(), curves.filter.size());
    }
  }
  if (f.attention) {
    std::string table = "model,positive_share,negative_share\n";
    std::printf("%-20s %14s %14s\n", "model", "positive", "negative");
    for (const auto& m : entries) {
      if (m.params == nullptr) continue;
      const AttentionSummary a = attention_summary(m, data.eval, opts);
      std::printf("%-20s %14.6f %14.6f\n", a.model.c_str(), a.positive, a.negative);
      table += a.model + "," + std::to_string(a.positive) + "," + std::to_string(a.negative) + "\n";
    }
    std::string text;
    for (const auto& h : header) text += "# " + h + "\n";
    write_text(out / "attention.csv", text + table);
  }
  return 0;
}

// ---- ablate -----------------------------------------------------------------

struct AblateFlags {
  TrainFlags train;
  std::string axis;
  std::string values;
  size_t eval_limit = 0;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    const size_t comma = std::min(s.find(',', pos), s.size());
    if (comma > pos) out.push_back(s.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

int cmd_ablate(const AblateFlags& f) {
  RunConfig base = base_config(f.train.common);
  merge_manifest(base, output_path(f.train.data.empty() ? base.data_dir : fs::path(f.train.data)));
  apply_train_flags(base, f.train);
  const auto values = split_list(f.values);
  if (values.empty()) throw std::invalid_argument("--values is empty");
  static const std::vector<std::string> kAxes{"lambda", "proportion", "margin", "mu", "strategy"};
  if (std::find(kAxes.begin(), kAxes.end(), f.axis) == kAxes.end()) {
    throw std::invalid_argument("--axis must be one of lambda, proportion, margin, mu, strategy");
  }
  const Datasets data = load_data(base, f.train.limit, f.eval_limit);
  const fs::path out = output_path(f.train.out.empty() ? base.report_dir / ("ablate_" + f.axis) : fs::path(f.train.out));
  fs::create_directories(out);

  std::string csv;
  for (const auto& h : audit_header(base, "ablate")) csv += "# " + h + "\n";
  csv += "axis,value,seed,qa_f1,filter_precision,filter_recall,filter_f1,w,b,m,status\n";
  bool failed = false;
  for (size_t i = 0; i < values.size(); ++i) {
    const std::string& v = values[i];
    RunConfig cfg = base;
    cfg.train.seed = base.train.seed + 1000003ULL * (i + 1);
    cfg.seed = cfg.train.seed;
    std::string line;
    try {
      if (f.axis == "lambda") {
        cfg.train.lambda = std::stod(v);
      } else if (f.axis == "proportion") {
        cfg.model.set_filter_proportion(std::stod(v));
      } else if (f.axis == "margin") {
        cfg.train.margin = MarginSetting::parse(v == "learnable" ? v : (v.starts_with("fixed:") ? v : "fixed:" + v));
      } else if (f.axis == "mu") {
        cfg.train.regime = Regime::kFilterPlusLm;
        cfg.train.mu = std::stod(v);
      } else {
        cfg.train.strategy = parse_strategy(v);
      }
      cfg.train.validate();
      std::printf("[%zu/%zu] %s=%s seed=%llu\n", i + 1, values.size(), f.axis.c_str(), v.c_str(),
                  static_cast<unsigned long long>(cfg.train.seed));
      std::fflush(stdout);
      TrainResult res = train_and_save(cfg, data, f.train.probe, out / ("point" + std::to_string(i) + ".ckpt"), false);
      EvalOptions opts;
      opts.strategy = cfg.train.strategy;
      opts.max_new_tokens = cfg.data.answer_length;
      ModelEntry entry{f.axis + "=" + v, cfg.train.regime, &res.params, cfg.train.strategy};
      const Condition cond{};
      const EvalReport rep = run_matrix(std::span(&entry, 1), data.eval, std::span(&cond, 1), opts);
      const ReportRow& r = rep.rows.front();
      char buf[320];
      std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,ok\n", f.axis.c_str(), v.c_str(),
                    static_cast<unsigned long long>(cfg.train.seed), r.qa_f1, r.filter.precision, r.filter.recall,
                    r.filter.f1, res.params.mask.w.value()(0, 0), res.params.mask.b.value()(0, 0),
                    static_cast<double>(res.params.head.margin()));
      line = buf;
    } catch (const std::exception& e) {
      failed = true;
      std::fprintf(stderr, "point %s=%s failed: %s\n", f.axis.c_str(), v.c_str(), e.what());
      line = f.axis + "," + v + "," + std::to_string(cfg.train.seed) + ",,,,,,,,error\n";
    }
    csv += line;
    std::fputs(line.c_str(), stdout);
  }
  write_text(out / "ablate.csv", csv);
  std::printf("wrote %s\n", (out / "ablate.csv").string().c_str());
  return failed ? 1 : 0;
}

// ---- grad-check -------------------------------------------------------------

int cmd_grad_check(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : run_grad_suite(seed)) {
    std::printf("%-36s max_rel_err=%.3e threshold=%.0e %s (worst %s)\n", c.name.c_str(), c.max_rel_error, c.threshold,
                c.passed() ? "ok" : "FAIL", c.worst.c_str());
    ok = ok && c.passed();
  }
  return ok ? 0 : 1;
}

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "Run-config JSON file (flags override it)");
  app->add_option("--seed", f.seed, "Seed recorded in every output");
}

void add_train_options(CLI::App* app, TrainFlags& f) {
  add_common(app, f.common);
  app->add_option("--data", f.data, "Dataset directory written by gen-data");
  app->add_option("--out", f.out, "Output path");
  app->add_option("--regime", f.regime, "sft | fltlm | fltlm-no-softmask | filter-only | filter-plus-lm");
  app->add_option("--lambda", f.lambda, "Weight of the filter loss in the joint loss");
  app->add_option("--mu", f.mu, "Weight of the LM loss in the filter-plus-lm regime");
  app->add_option("--strategy", f.strategy, "pairwise | independent | accumulative | naive");
  app->add_option("--filter-proportion", f.proportion, "Fraction of layers feeding the filter");
  app->add_option("--margin", f.margin, "learnable | fixed:<value>");
  app->add_option("--epochs", f.epochs, "Passes over the training split");
  app->add_option("--batch-size", f.batch_size, "Samples per optimizer step");
  app->add_option("--lr-multiplier", f.lr_multiplier, "Scales both learning-rate groups");
  app->add_option("--limit", f.limit, "Use only the first N training samples");
  app->add_option("--probe", f.probe, "Held-out samples for the logged filter accuracy");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fltlm: long-context reader with an integrated context filter"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic multi-hop corpus");
  add_common(gen_cmd, gen.common);
  gen_cmd->add_option("--out", gen.out, "Output directory");
  gen_cmd->add_option("--hops", gen.hops, "Reasoning hops per question (1-3)");
  gen_cmd->add_option("--n-docs", gen.n_docs, "Documents per sample");
  gen_cmd->add_option("--facts-per-doc", gen.facts, "Facts per document");
  gen_cmd->add_option("--entities", gen.entities, "Entity vocabulary size");
  gen_cmd->add_option("--train-size", gen.train_size, "Training samples");
  gen_cmd->add_option("--eval-size", gen.eval_size, "Eval samples");
  gen_cmd->add_option("--distractors", gen.distractors, "random | near-miss");

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "Train one regime and write a checkpoint plus CSV log");
  add_train_options(train_cmd, tr);

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints over input conditions");
  add_common(eval_cmd, ev.common);
  eval_cmd->add_option("--data", ev.data, "Dataset directory written by gen-data");
  eval_cmd->add_option("--model", ev.models, "name=checkpoint (repeatable)");
  eval_cmd->add_flag("--baseline", ev.baseline, "Include an untrained model");
  eval_cmd->add_option("--filter-checkpoint", ev.filter_ckpt, "Filter for the filter-then-read row");
  eval_cmd->add_option("--reader-checkpoint", ev.reader_ckpt, "Reader for the filter-then-read row");
  eval_cmd->add_option("--conditions", ev.conditions, "all or e.g. original/pos+neg,reordered/pos");
  eval_cmd->add_flag("--recall-curve", ev.recall, "Also write recall@k of the filter ranking");
  eval_cmd->add_flag("--attention-analysis", ev.attention, "Also write reader attention on relevant vs irrelevant docs");
  eval_cmd->add_option("--strategy", ev.strategy, "Extraction strategy used at inference");
  eval_cmd->add_option("--out", ev.out, "Report directory");
  eval_cmd->add_option("--limit", ev.limit, "Use only the first N eval samples");

  AblateFlags ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate one model per value of a sweep axis");
  add_train_options(ablate_cmd, ab.train);
  ablate_cmd->add_option("--axis", ab.axis, "lambda | proportion | margin | mu | strategy")->required();
  ablate_cmd->add_option("--values", ab.values, "Comma-separated values")->required();
  ablate_cmd->add_option("--eval-limit", ab.eval_limit, "Use only the first N eval samples");

  std::uint64_t grad_seed = 7;
  auto* grad_cmd = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
  grad_cmd->add_option("--seed", grad_seed, "Seed for the random probe inputs");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*ablate_cmd) return cmd_ablate(ab);
    if (*grad_cmd) return cmd_grad_check(grad_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
