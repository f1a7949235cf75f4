#pragma once

#include "fltlm/autodiff.hpp"
#include "fltlm/checkpoint.hpp"
#include "fltlm/input_builder.hpp"
#include "fltlm/softmask.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace fltlm {

struct ModelConfig {
  int vocab_size = Vocabulary::kSize;
  int d_model = 64;
  int n_heads = 4;
  int total_layers = 8;
  /// Number of leading layers whose output feeds the context filter (N).
  int filter_layers = 4;
  Index max_context = 512;
  bool rotary = true;
  int ffn_multiplier = 4;

  int head_dim() const { return d_model / n_heads; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  /// Sets filter_layers = round(proportion * total_layers).
  void set_filter_proportion(double proportion);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct BasicLayerParams {
  BasicParameter<Scalar> attn_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out;

  std::vector<BasicParameter<Scalar>*> parameters() {
    return {&attn_norm, &wq, &wk, &wv, &wo, &ffn_norm, &w_in, &w_out};
  }
};

/// Decoder-only transformer weights. Sentinel embedding rows are zero and frozen.
template <typename Scalar>
struct BasicModelParams {
  ModelConfig config;
  BasicParameter<Scalar> embedding;
  std::vector<BasicLayerParams<Scalar>> layers;
  BasicParameter<Scalar> final_norm;
  BasicParameter<Scalar> output;

  std::vector<BasicParameter<Scalar>*> parameters();
  std::vector<const BasicParameter<Scalar>*> parameters() const;

  template <typename Other>
  BasicModelParams<Other> cast() const;
};

using ModelParams = BasicModelParams<float>;

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Which attention masking the first N layers used when producing filter states.
enum class FilterMasking { kNone, kIndependent };

template <typename Scalar>
struct ForwardRequest {
  std::span<const int> tokens;
  /// Additive [L x L] bias for layers N+1..2N only; entries must be <= 0.
  std::optional<Var<Scalar>> reader_bias;
  /// Constant mask (0 / -inf) for layers 1..N only.
  const MatrixX<Scalar>* filter_mask = nullptr;
  /// Run blocks [start_layer, stop_layer); -1 means through the output head.
  int start_layer = 0;
  int stop_layer = -1;
  /// Residual stream entering block start_layer; required when start_layer > 0.
  std::optional<Var<Scalar>> resume_from;
  AttentionProbe* reader_probe = nullptr;
  /// When non-empty, logits are produced for these rows only (in this order).
  std::span<const Index> logit_rows;
};

template <typename Scalar>
struct ForwardResult {
  /// hidden[j] is the residual stream after start_layer + j blocks; with
  /// start_layer = 0, hidden[0] is the embedding.
  std::vector<Var<Scalar>> hidden;
  /// Present when the request ran through every layer.
  std::optional<Var<Scalar>> logits;
};

template <typename Scalar>
ForwardResult<Scalar> forward(Graph<Scalar>& graph, BasicModelParams<Scalar>& params, const ForwardRequest<Scalar>& request);

/// Cached-key decoder over float weights. Attention bias is supplied as a
/// DocumentBias and realised per query row over the cached key positions.
class InferenceSession {
 public:
  InferenceSession(const ModelParams& params, const DocumentBias* bias = nullptr);

  /// Appends tokens and returns the logits row of the last one.
  Vector append(std::span<const int> tokens, AttentionProbe* reader_probe = nullptr);
  Index length() const { return length_; }

 private:
  const ModelParams& params_;
  const DocumentBias* bias_;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  Index length_ = 0;
};

struct Generation {
  std::vector<int> tokens;
  bool truncated = false;
};

/// Greedy decoding from an infer-mode input. Stops at the answer delimiter,
/// at max_new_tokens, or at the context limit (truncated = true).
Generation generate(const ModelParams& params, const SegmentedInput& input, const DocumentBias* bias,
                    int max_new_tokens);

/// Same decoding by recomputing the full forward pass each step, no cache.
Generation generate_uncached(ModelParams& params, const SegmentedInput& input, const DocumentBias* bias,
                             int max_new_tokens);

struct AttentionShare {
  std::vector<double> per_document;
  double positive_mean = 0.0;  // mean share of a relevant document
  double negative_mean = 0.0;  // mean share of a distractor
  size_t positives = 0;
  size_t negatives = 0;
};

/// Post-softmax attention of the first answer-generation position, averaged
/// over all heads of layers N+1..2N, summed over each document's columns.
AttentionShare attention_share(const ModelParams& params, const SegmentedInput& input, const DocumentBias* bias);

void append_to_checkpoint(const ModelParams& params, Checkpoint& ckpt);
/// Loads weights into a model built from `config`; shapes must match.
ModelParams model_from_checkpoint(const ModelConfig& config, const Checkpoint& ckpt);

}  // namespace fltlm
