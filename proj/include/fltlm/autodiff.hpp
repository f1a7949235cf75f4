#pragma once

#include "fltlm/tensor.hpp"

#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

namespace fltlm {

template <typename Scalar>
class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const MatrixX<Scalar>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in execution order, so reverse
/// insertion order is a valid topological order for the backward sweep.
template <typename Scalar>
class Graph {
 public:
  using Mat = MatrixX<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Mat value);
  /// Leaf that receives a gradient but is not tied to a parameter.
  Var<Scalar> input(Mat value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var<Scalar> parameter(BasicParameter<Scalar>& p);

  Var<Scalar> record(Mat value, std::vector<int> parents, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once. Parameter leaves
  /// accumulate into their owners' grad buffers.
  void backward(Var<Scalar> loss);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient of a node after backward(); zeros if none flowed.
  Mat grad(Var<Scalar> v) const;
  void accumulate(int id, const Mat& delta);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = delta;
      n.has_grad = true;
    } else {
      n.grad += delta;
    }
  }

  size_t size() const { return nodes_.size(); }

  /// With gradients disabled, leaves never require grad and no backward
  /// closures are kept (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BasicParameter<Scalar>* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> param_nodes_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

template <typename Scalar>
const MatrixX<Scalar>& Var<Scalar>::value() const {
  return graph_->value(id_);
}

template <typename Scalar>
Scalar Var<Scalar>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_string(v.rows(), v.cols()));
  return v(0, 0);
}

// ---- primitives -----------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);
/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b);
/// Adds a 1xC row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row);
/// Multiplies every entry by a 1x1 variable.
template <typename Scalar>
Var<Scalar> mul_scalar(Var<Scalar> a, Var<Scalar> s);
/// Adds a 1x1 variable to every entry.
template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Var<Scalar> s);
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor);
template <typename Scalar>
Var<Scalar> shift(Var<Scalar> a, Scalar offset);
template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a);
/// Elementwise min(0, x); subgradient 0 at x == 0.
template <typename Scalar>
Var<Scalar> min_zero(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> square_sum(Var<Scalar> a);
/// log(1 + sum_i exp(x_i)) over all entries; 0 for an empty input.
template <typename Scalar>
Var<Scalar> log1p_sum_exp(Var<Scalar> a);

template <typename Scalar>
Var<Scalar> select_rows(Var<Scalar> a, std::span<const Index> rows);
template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts);
template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const int> ids);

/// Row-wise RMS normalisation with a learned 1xC gain.
template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain, Scalar eps = Scalar(1e-5));

/// Rotary position encoding applied per head to a [L x (heads*head_dim)] block.
template <typename Scalar>
Var<Scalar> rope(Var<Scalar> x, int n_heads, Index position_offset = 0, Scalar base = Scalar(10000));

/// softmax(x + bias) per row. `bias` may match x's shape or be a single row
/// broadcast over all rows; -inf entries yield exact zeros.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x, std::optional<Var<Scalar>> bias = std::nullopt);

/// Mean negative log-likelihood of `targets[r]` under softmax(logits[r]) over
/// rows with mask[r] set. Accumulated in double.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets, const std::vector<bool>& mask);

/// Captures post-softmax attention probabilities of selected rows, averaged
/// over heads, for analysis.
struct AttentionProbe {
  std::vector<Index> rows;
  std::vector<Matrix> per_layer;  // [rows.size() x L] per recorded call
};

template <typename Scalar>
struct AttentionMasks {
  /// Additive, differentiable [L x L] bias on the scaled scores.
  std::optional<Var<Scalar>> bias;
  /// Additive constant [L x L] mask (0 or -inf), no gradient.
  const MatrixX<Scalar>* hard = nullptr;
  AttentionProbe* probe = nullptr;
};

/// Multi-head causal self-attention: per head softmax(q k^T / sqrt(d) + bias) v.
template <typename Scalar>
Var<Scalar> causal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int n_heads,
                             const AttentionMasks<Scalar>& masks = {});

// ---- gradient verification -------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every listed parameter. The relative error uses an
/// absolute floor of 1e-6 in the denominator.
GradCheckReport finite_diff_check(const std::function<Var<double>(Graph<double>&)>& f,
                                  std::span<BasicParameter<double>* const> params, double eps);

}  // namespace fltlm
