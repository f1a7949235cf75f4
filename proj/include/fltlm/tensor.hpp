#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fltlm {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<float>;
using Vector = VectorX<float>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

/// Dense row-major array of up to two dimensions with an optional gradient
/// buffer of the same shape. Scalars are 1x1, column vectors are nx1.
template <typename Scalar>
class BasicTensor {
 public:
  BasicTensor() = default;
  BasicTensor(Index rows, Index cols) : value_(MatrixX<Scalar>::Zero(rows, cols)) {}
  explicit BasicTensor(MatrixX<Scalar> value) : value_(std::move(value)) {}

  std::vector<Index> shape() const { return {value_.rows(), value_.cols()}; }
  Index size() const { return value_.size(); }
  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }

  std::span<const Scalar> data() const { return {value_.data(), static_cast<size_t>(value_.size())}; }
  std::span<Scalar> data() { return {value_.data(), static_cast<size_t>(value_.size())}; }

  const MatrixX<Scalar>& value() const { return value_; }
  MatrixX<Scalar>& value() { return value_; }

  bool has_grad() const { return grad_.has_value(); }
  const MatrixX<Scalar>& grad() const { return *grad_; }
  MatrixX<Scalar>& grad() {
    if (!grad_) grad_ = MatrixX<Scalar>::Zero(value_.rows(), value_.cols());
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(value_.template cast<Other>());
  }

 private:
  MatrixX<Scalar> value_;
  std::optional<MatrixX<Scalar>> grad_;
};

using Tensor = BasicTensor<float>;

enum class ParamGroup { kBackbone, kHead };

/// A named trainable array. Rows listed in `frozen_rows` never receive
/// updates; the sentinel embeddings use this to stay at zero.
template <typename Scalar>
struct BasicParameter {
  std::string name;
  BasicTensor<Scalar> tensor;
  ParamGroup group = ParamGroup::kBackbone;
  bool trainable = true;
  bool decay = true;
  std::vector<Index> frozen_rows;

  BasicParameter() = default;
  BasicParameter(std::string n, MatrixX<Scalar> v, ParamGroup g = ParamGroup::kBackbone, bool d = true)
      : name(std::move(n)), tensor(std::move(v)), group(g), decay(d) {}

  const MatrixX<Scalar>& value() const { return tensor.value(); }
  MatrixX<Scalar>& value() { return tensor.value(); }
  MatrixX<Scalar>& grad() { return tensor.grad(); }

  template <typename Other>
  BasicParameter<Other> cast() const {
    BasicParameter<Other> out(name, value().template cast<Other>(), group, decay);
    out.trainable = trainable;
    out.frozen_rows = frozen_rows;
    return out;
  }
};

using Parameter = BasicParameter<float>;

}  // namespace fltlm
