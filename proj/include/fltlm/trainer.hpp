#pragma once

#include "fltlm/datagen.hpp"
#include "fltlm/filter.hpp"
#include "fltlm/model.hpp"
#include "fltlm/softmask.hpp"

#include <functional>
#include <optional>
#include <unordered_map>
#include <string>
#include <vector>

namespace fltlm {

enum class Regime { kSft, kFltlm, kFltlmNoSoftmask, kFilterOnly, kFilterPlusLm };

/// Accepts hyphen or underscore spellings.
Regime parse_regime(std::string_view name);
std::string to_string(Regime regime);
bool uses_filter(Regime regime);

/// Backbone, scoring head and soft-mask scalars trained together.
template <typename Scalar>
struct BasicFltlmParams {
  BasicModelParams<Scalar> model;
  BasicFilterHead<Scalar> head;
  BasicSoftMaskParams<Scalar> mask;

  std::vector<BasicParameter<Scalar>*> parameters() {
    auto out = model.parameters();
    for (auto* p : head.parameters()) out.push_back(p);
    for (auto* p : mask.parameters()) out.push_back(p);
    return out;
  }

  template <typename Other>
  BasicFltlmParams<Other> cast() const {
    return {model.template cast<Other>(), head.template cast<Other>(), mask.template cast<Other>()};
  }
};

using FltlmParams = BasicFltlmParams<float>;

FltlmParams init_fltlm(const ModelConfig& config, std::uint64_t seed);

/// Margin m of the filter loss: learnable (m = exp(gamma), gamma starts at 0) or held fixed.
struct MarginSetting {
  bool learnable = true;
  double value = 1.0;

  static MarginSetting parse(std::string_view text);  // "learnable" | "fixed:<v>"
  std::string to_string() const;
  friend bool operator==(const MarginSetting&, const MarginSetting&) = default;
};

struct TrainConfig {
  Regime regime = Regime::kFltlm;
  double lambda = 0.5;
  double mu = 0.5;
  ExtractionStrategy strategy = ExtractionStrategy::kNaive;
  MarginSetting margin;
  int batch_size = 8;
  int epochs = 1;
  double backbone_lr = 1e-4;
  double head_lr = 1e-2;
  /// Scales both groups, keeping their ratio.
  double lr_multiplier = 1.0;
  double warmup_ratio = 0.01;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  /// Evaluate probe filter accuracy every this many steps (0 disables).
  int probe_every = 50;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LearningRates {
  double backbone = 0.0;
  double head = 0.0;
};

/// Linear warm-up over the first warmup_ratio of steps, then linear decay to 0.
LearningRates lr_at(size_t step, size_t total_steps, const TrainConfig& cfg);

template <typename Scalar>
struct PassResult {
  Var<Scalar> loss;
  std::optional<Var<Scalar>> lm;
  std::optional<Var<Scalar>> flt;
  std::optional<Var<Scalar>> scores;
  std::optional<Var<Scalar>> intensities;
};

/// One forward pass under the regime: layer-N states, scores and L_flt, then
/// the soft-masked reader layers and L_lm over the answer tokens.
template <typename Scalar>
PassResult<Scalar> fltlm_pass(Graph<Scalar>& graph, BasicFltlmParams<Scalar>& params, const QASample& sample,
                              const SegmentedInput& input, const TrainConfig& cfg);

/// Parameters the regime updates (also honouring each parameter's trainable flag).
std::vector<Parameter*> trainable_parameters(FltlmParams& params, Regime regime);

/// Decoupled weight decay Adam. Frozen rows keep their values and moments.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(std::span<Parameter* const> params, const LearningRates& lr);
  size_t steps() const { return t_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  TrainConfig cfg_;
  std::unordered_map<std::string, Moments> moments_;
  size_t t_ = 0;
};

struct StepLog {
  size_t step = 0;
  double lm_loss = 0.0;   // NaN when the regime does not compute it
  double flt_loss = 0.0;  // NaN when the regime does not compute it
  double loss = 0.0;
  double lr_backbone = 0.0;
  double lr_head = 0.0;
  double w = 0.0;
  double b = 0.0;
  double margin = 0.0;
  double probe_accuracy = 0.0;  // NaN when not evaluated at this step
  bool applied = true;
};

/// Accumulates gradients over the batch (mean), clips to the global norm and
/// applies one update. A non-finite loss or gradient leaves every parameter
/// untouched and returns applied = false.
StepLog train_step(FltlmParams& params, std::span<const QASample> batch, const TrainConfig& cfg, AdamW& optimizer,
                   const LearningRates& lr);

/// Fraction of probe documents whose s_i > 0 decision matches the label.
double probe_filter_accuracy(FltlmParams& params, std::span<const QASample> probe, ExtractionStrategy strategy);

struct TrainResult {
  FltlmParams params;
  std::vector<StepLog> log;
  std::vector<std::string> events;
  size_t total_steps = 0;
};

/// `on_epoch` receives the 1-based epoch number and the parameters after it.
TrainResult train(FltlmParams params, std::span<const QASample> data, std::span<const QASample> probe,
                  const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step = {},
                  const std::function<void(int, const FltlmParams&)>& on_epoch = {});

/// CSV with '# key=value' header lines then step,L_lm,L_flt,loss,lr_backbone,lr_head,w,b,m,probe_acc.
std::string train_log_csv(std::span<const StepLog> log, std::span<const std::string> header);

Checkpoint to_checkpoint(const FltlmParams& params, const std::string& metadata_json);
/// Reads the model config from the checkpoint metadata ("model" section).
FltlmParams from_checkpoint(const Checkpoint& ckpt);

}  // namespace fltlm
