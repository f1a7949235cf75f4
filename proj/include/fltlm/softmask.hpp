#pragma once

#include "fltlm/autodiff.hpp"
#include "fltlm/input_builder.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace fltlm {

/// Scalars of I = min(0, w * s + b). Both live in the head learning-rate group.
template <typename Scalar>
struct BasicSoftMaskParams {
  BasicParameter<Scalar> w{"softmask.w", MatrixX<Scalar>::Constant(1, 1, Scalar(1e-3)), ParamGroup::kHead, false};
  BasicParameter<Scalar> b{"softmask.b", MatrixX<Scalar>::Zero(1, 1), ParamGroup::kHead, false};

  std::vector<BasicParameter<Scalar>*> parameters() { return {&w, &b}; }

  template <typename Other>
  BasicSoftMaskParams<Other> cast() const {
    BasicSoftMaskParams<Other> out;
    out.w = w.template cast<Other>();
    out.b = b.template cast<Other>();
    return out;
  }
};

using SoftMaskParams = BasicSoftMaskParams<float>;

template <typename Scalar>
Scalar intensity(Scalar score, Scalar w, Scalar b) {
  return std::min(Scalar(0), w * score + b);
}

/// Differentiable I_i = min(0, w * s_i + b) for an n x 1 score column.
template <typename Scalar>
Var<Scalar> intensities(Var<Scalar> scores, Var<Scalar> w, Var<Scalar> b) {
  return min_zero(add_scalar(mul_scalar(scores, w), b));
}

/// Structured form of the soft-mask bias: rows r >= first_row[i] receive
/// intensity[i] on the columns of document i. Storage is O(documents).
struct DocumentBias {
  std::vector<Span> columns;
  std::vector<Index> first_row;
  std::vector<float> intensity;

  /// Validates that every intensity is <= 0.
  static DocumentBias from_input(const SegmentedInput& input, std::span<const float> intensities);

  bool empty() const { return intensity.empty(); }
  /// Adds the bias of query row `row` to `scores` (one entry per key column).
  void add_to_row(Index row, std::span<float> scores) const;
  Matrix dense(Index length) const;
};

/// Dense [L x L] bias with bias[r, c] += I_i for r >= u_i and c in document
/// i's masked columns. Gradients flow back into the intensities.
template <typename Scalar>
Var<Scalar> build_bias(const SegmentedInput& input, Var<Scalar> intensities, Index length);

}  // namespace fltlm
