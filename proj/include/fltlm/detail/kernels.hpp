#pragma once

// Scalar kernels shared by the taped ops and the cached decoder so both
// paths round identically.

#include "fltlm/tensor.hpp"

#include <cmath>

namespace fltlm::detail {

template <typename Scalar>
inline Scalar gelu_value(Scalar x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar kA = Scalar(0.044715);
  const Scalar t = std::tanh(kC * (x + kA * x * x * x));
  return Scalar(0.5) * x * (Scalar(1) + t);
}

template <typename Scalar>
inline Scalar gelu_derivative(Scalar x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);
  constexpr Scalar kA = Scalar(0.044715);
  const Scalar t = std::tanh(kC * (x + kA * x * x * x));
  const Scalar dt = (Scalar(1) - t * t) * kC * (Scalar(1) + Scalar(3) * kA * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * dt;
}

/// Returns 1 / rms(row) and writes row * gain / rms(row) into out.
template <typename Scalar, typename RowIn, typename RowGain, typename RowOut>
inline Scalar rms_norm_row(const RowIn& row, const RowGain& gain, RowOut&& out, Scalar eps) {
  const Scalar ms = row.squaredNorm() / static_cast<Scalar>(row.size());
  const Scalar inv = Scalar(1) / std::sqrt(ms + eps);
  out = row.cwiseProduct(gain) * inv;
  return inv;
}

template <typename Scalar>
inline void rope_tables(Index rows, Index half, Index offset, Scalar base, MatrixX<Scalar>& cosv,
                        MatrixX<Scalar>& sinv) {
  cosv.resize(rows, half);
  sinv.resize(rows, half);
  for (Index j = 0; j < half; ++j) {
    const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(j) / (2.0 * half));
    for (Index r = 0; r < rows; ++r) {
      const double angle = static_cast<double>(r + offset) * freq;
      cosv(r, j) = static_cast<Scalar>(std::cos(angle));
      sinv(r, j) = static_cast<Scalar>(std::sin(angle));
    }
  }
}

/// Rotates consecutive pairs within each head; `inverse` applies the transpose.
template <typename Scalar>
inline void rope_apply(const MatrixX<Scalar>& in, MatrixX<Scalar>& out, int n_heads, const MatrixX<Scalar>& cosv,
                       const MatrixX<Scalar>& sinv, bool inverse) {
  const Index head_dim = in.cols() / n_heads;
  const Index half = head_dim / 2;
  out.resize(in.rows(), in.cols());
  for (Index r = 0; r < in.rows(); ++r) {
    for (int h = 0; h < n_heads; ++h) {
      const Index base_col = h * head_dim;
      for (Index j = 0; j < half; ++j) {
        const Scalar c = cosv(r, j);
        const Scalar s = inverse ? -sinv(r, j) : sinv(r, j);
        const Scalar x0 = in(r, base_col + 2 * j);
        const Scalar x1 = in(r, base_col + 2 * j + 1);
        out(r, base_col + 2 * j) = x0 * c - x1 * s;
        out(r, base_col + 2 * j + 1) = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace fltlm::detail
