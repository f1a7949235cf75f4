#include "fltlm/autodiff.hpp"

#include "fltlm/detail/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace fltlm {

namespace {

template <typename Scalar>
void require_same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("variables belong to different graphs");
}

template <typename Scalar>
void require_scalar(const Var<Scalar>& s, const char* what) {
  if (s.value().size() != 1) {
    throw ShapeError(std::string(what) + ": expected 1x1, got " + shape_string(s.rows(), s.cols()));
  }
}

}  // namespace

// ---- Graph ------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> Graph<Scalar>::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::input(Mat value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::parameter(BasicParameter<Scalar>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.value = p.value();
  n.requires_grad = grad_enabled_ && p.trainable;
  n.param = &p;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return {this, id};
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(Mat value, std::vector<int> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [this](int p) { return nodes_[p].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
void Graph<Scalar>::accumulate(int id, const Mat& delta) {
  accumulate_expr(id, delta);
}

template <typename Scalar>
typename Graph<Scalar>::Mat Graph<Scalar>::grad(Var<Scalar> v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

template <typename Scalar>
void Graph<Scalar>::backward(Var<Scalar> loss) {
  if (consumed_) throw std::logic_error("backward() called twice on the same graph");
  consumed_ = true;
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
  }
  Node& root = nodes_[loss.id()];
  if (!root.requires_grad) return;
  root.grad = Mat::Ones(1, 1);
  root.has_grad = true;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) {
      // The closure may append to parents' grads only (ids < id), so the
      // reference to n.grad stays valid.
      n.backward(*this, n.grad);
    }
    if (n.param != nullptr) n.param->grad() += n.grad;
  }
}

// ---- linear algebra ---------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.rows(), a.cols()) + " x " +
                     shape_string(b.rows(), b.cols()));
  }
  auto& g = a.graph();
  MatrixX<Scalar> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    if (g.requires_grad(ia)) g.accumulate_expr(ia, dout * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate_expr(ib, g.value(ia).transpose() * dout);
  });
}

template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_string(a.rows(), a.cols()) + " x " +
                     shape_string(b.rows(), b.cols()) + "^T");
  }
  auto& g = a.graph();
  MatrixX<Scalar> out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    if (g.requires_grad(ia)) g.accumulate_expr(ia, dout * g.value(ib));
    if (g.requires_grad(ib)) g.accumulate_expr(ib, dout.transpose() * g.value(ia));
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: " + shape_string(a.rows(), a.cols()) + " vs " + shape_string(b.rows(), b.cols()));
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.value() + b.value(), {ia, ib},
                          [ia, ib](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            g.accumulate(ia, dout);
                            g.accumulate(ib, dout);
                          });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("sub: " + shape_string(a.rows(), a.cols()) + " vs " + shape_string(b.rows(), b.cols()));
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.value() - b.value(), {ia, ib},
                          [ia, ib](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            g.accumulate(ia, dout);
                            g.accumulate_expr(ib, -dout);
                          });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("hadamard: " + shape_string(a.rows(), a.cols()) + " vs " + shape_string(b.rows(), b.cols()));
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.value().cwiseProduct(b.value()), {ia, ib},
                          [ia, ib](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            if (g.requires_grad(ia)) g.accumulate_expr(ia, dout.cwiseProduct(g.value(ib)));
                            if (g.requires_grad(ib)) g.accumulate_expr(ib, dout.cwiseProduct(g.value(ia)));
                          });
}

template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  require_same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_string(a.rows(), a.cols()) + " + " + shape_string(row.rows(), row.cols()));
  }
  MatrixX<Scalar> out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return a.graph().record(std::move(out), {ia, ir}, [ia, ir](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    g.accumulate(ia, dout);
    if (g.requires_grad(ir)) g.accumulate_expr(ir, dout.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> mul_scalar(Var<Scalar> a, Var<Scalar> s) {
  require_same_graph(a, s);
  require_scalar(s, "mul_scalar");
  const Scalar factor = s.item();
  const int ia = a.id(), is = s.id();
  return a.graph().record(a.value() * factor, {ia, is},
                          [ia, is](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            const Scalar f = g.value(is)(0, 0);
                            if (g.requires_grad(ia)) g.accumulate_expr(ia, dout * f);
                            if (g.requires_grad(is)) {
                              MatrixX<Scalar> d(1, 1);
                              d(0, 0) = dout.cwiseProduct(g.value(ia)).sum();
                              g.accumulate(is, d);
                            }
                          });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Var<Scalar> s) {
  require_same_graph(a, s);
  require_scalar(s, "add_scalar");
  MatrixX<Scalar> out = a.value().array() + s.item();
  const int ia = a.id(), is = s.id();
  return a.graph().record(std::move(out), {ia, is}, [ia, is](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    g.accumulate(ia, dout);
    if (g.requires_grad(is)) {
      MatrixX<Scalar> d(1, 1);
      d(0, 0) = dout.sum();
      g.accumulate(is, d);
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  const int ia = a.id();
  return a.graph().record(a.value() * factor, {ia}, [ia, factor](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    g.accumulate_expr(ia, dout * factor);
  });
}

template <typename Scalar>
Var<Scalar> shift(Var<Scalar> a, Scalar offset) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value().array() + offset;
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph<Scalar>& g, const MatrixX<Scalar>& dout) { g.accumulate(ia, dout); });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  const int ia = a.id();
  const int self = static_cast<int>(a.graph().size());
  MatrixX<Scalar> out = a.value().array().exp();
  return a.graph().record(std::move(out), {ia}, [ia, self](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    g.accumulate_expr(ia, dout.cwiseProduct(g.value(self)));
  });
}

template <typename Scalar>
Var<Scalar> min_zero(Var<Scalar> a) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value().cwiseMin(Scalar(0));
  return a.graph().record(std::move(out), {ia}, [ia](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    MatrixX<Scalar> d = (g.value(ia).array() < Scalar(0)).select(dout, Scalar(0));
    g.accumulate(ia, d);
  });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) { return detail::gelu_value(x); });
  return a.graph().record(std::move(out), {ia}, [ia](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    MatrixX<Scalar> d = g.value(ia).unaryExpr([](Scalar x) { return detail::gelu_derivative(x); });
    g.accumulate_expr(ia, d.cwiseProduct(dout));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  const int ia = a.id();
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    const auto& x = g.value(ia);
    g.accumulate_expr(ia, MatrixX<Scalar>::Constant(x.rows(), x.cols(), dout(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> square_sum(Var<Scalar> a) {
  const int ia = a.id();
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    g.accumulate_expr(ia, g.value(ia) * (Scalar(2) * dout(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> log1p_sum_exp(Var<Scalar> a) {
  const int ia = a.id();
  const auto& x = a.value();
  double top = 0.0;
  for (Index i = 0; i < x.size(); ++i) top = std::max(top, static_cast<double>(x.data()[i]));
  double acc = std::exp(-top);
  for (Index i = 0; i < x.size(); ++i) acc += std::exp(static_cast<double>(x.data()[i]) - top);
  const double value = top + std::log(acc);
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(value);
  return a.graph().record(std::move(out), {ia}, [ia, value](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    const auto& x = g.value(ia);
    MatrixX<Scalar> d(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
      d.data()[i] = static_cast<Scalar>(std::exp(static_cast<double>(x.data()[i]) - value)) * dout(0, 0);
    }
    g.accumulate(ia, d);
  });
}

// ---- indexing ---------------------------------------------------------------

template <typename Scalar>
Var<Scalar> select_rows(Var<Scalar> a, std::span<const Index> rows) {
  const auto& x = a.value();
  MatrixX<Scalar> out(static_cast<Index>(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      throw std::out_of_range("select_rows: row " + std::to_string(rows[i]) + " outside " +
                              shape_string(x.rows(), x.cols()));
    }
    out.row(static_cast<Index>(i)) = x.row(rows[i]);
  }
  const int ia = a.id();
  std::vector<Index> idx(rows.begin(), rows.end());
  return a.graph().record(std::move(out), {ia}, [ia, idx = std::move(idx)](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    const auto& x = g.value(ia);
    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(x.rows(), x.cols());
    for (size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += dout.row(static_cast<Index>(i));
    g.accumulate(ia, d);
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id());
  }
  MatrixX<Scalar> out(rows, cols);
  for (size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  auto& g = parts[0].graph();
  std::vector<int> parents = ids;
  return g.record(std::move(out), std::move(parents),
                  [ids, offsets](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                    for (size_t i = 0; i < ids.size(); ++i) {
                      if (!g.requires_grad(ids[i])) continue;
                      const Index r = g.value(ids[i]).rows();
                      g.accumulate_expr(ids[i], dout.middleRows(offsets[i], r));
                    }
                  });
}

template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const int> ids) {
  const auto& t = table.value();
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), t.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw std::out_of_range("embedding: id " + std::to_string(ids[i]));
    out.row(static_cast<Index>(i)) = t.row(ids[i]);
  }
  const int it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return table.graph().record(std::move(out), {it}, [it, idv = std::move(idv)](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
    const auto& t = g.value(it);
    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(t.rows(), t.cols());
    for (size_t i = 0; i < idv.size(); ++i) d.row(idv[i]) += dout.row(static_cast<Index>(i));
    g.accumulate(it, d);
  });
}

// ---- normalisation and position encoding ------------------------------------

template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain, Scalar eps) {
  require_same_graph(x, gain);
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw ShapeError("rms_norm: gain must be 1xC");
  const auto& xv = x.value();
  const Index cols = xv.cols();
  VectorX<Scalar> inv(xv.rows());
  MatrixX<Scalar> out(xv.rows(), cols);
  for (Index r = 0; r < xv.rows(); ++r) {
    inv(r) = detail::rms_norm_row<Scalar>(xv.row(r), gain.value().row(0), out.row(r), eps);
  }
  const int ix = x.id(), ig = gain.id();
  return x.graph().record(std::move(out), {ix, ig},
                          [ix, ig, inv](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            const auto& xv = g.value(ix);
                            const auto& gv = g.value(ig);
                            const Index cols = xv.cols();
                            if (g.requires_grad(ix)) {
                              MatrixX<Scalar> dx(xv.rows(), cols);
                              for (Index r = 0; r < xv.rows(); ++r) {
                                const auto gy = dout.row(r).cwiseProduct(gv.row(0));
                                const Scalar dot = gy.dot(xv.row(r));
                                const Scalar ir = inv(r);
                                dx.row(r) = gy * ir - xv.row(r) * (ir * ir * ir * dot / static_cast<Scalar>(cols));
                              }
                              g.accumulate(ix, dx);
                            }
                            if (g.requires_grad(ig)) {
                              MatrixX<Scalar> dg = MatrixX<Scalar>::Zero(1, cols);
                              for (Index r = 0; r < xv.rows(); ++r) dg += dout.row(r).cwiseProduct(xv.row(r)) * inv(r);
                              g.accumulate(ig, dg);
                            }
                          });
}

template <typename Scalar>
Var<Scalar> rope(Var<Scalar> x, int n_heads, Index position_offset, Scalar base) {
  const auto& xv = x.value();
  if (n_heads <= 0 || xv.cols() % n_heads != 0 || (xv.cols() / n_heads) % 2 != 0) {
    throw ShapeError("rope: width " + std::to_string(xv.cols()) + " incompatible with " + std::to_string(n_heads) +
                     " heads");
  }
  MatrixX<Scalar> cosv, sinv;
  detail::rope_tables<Scalar>(xv.rows(), xv.cols() / n_heads / 2, position_offset, base, cosv, sinv);
  MatrixX<Scalar> out;
  detail::rope_apply(xv, out, n_heads, cosv, sinv, false);
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix},
                          [ix, n_heads, cosv = std::move(cosv), sinv = std::move(sinv)](Graph<Scalar>& g,
                                                                                        const MatrixX<Scalar>& dout) {
                            MatrixX<Scalar> d;
                            detail::rope_apply(dout, d, n_heads, cosv, sinv, true);
                            g.accumulate(ix, d);
                          });
}

// ---- softmax and losses -----------------------------------------------------

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x, std::optional<Var<Scalar>> bias) {
  const auto& xv = x.value();
  MatrixX<Scalar> z = xv;
  bool broadcast = false;
  if (bias) {
    require_same_graph(x, *bias);
    const auto& bv = bias->value();
    if (bv.rows() == xv.rows() && bv.cols() == xv.cols()) {
      z += bv;
    } else if (bv.rows() == 1 && bv.cols() == xv.cols()) {
      z.rowwise() += bv.row(0);
      broadcast = true;
    } else {
      throw ShapeError("softmax_rows: bias " + shape_string(bv.rows(), bv.cols()) + " not broadcastable to " +
                       shape_string(xv.rows(), xv.cols()));
    }
  }
  MatrixX<Scalar> out(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar top = z.row(r).maxCoeff();
    if (top == -std::numeric_limits<Scalar>::infinity()) {
      throw std::domain_error("softmax_rows: row " + std::to_string(r) + " is entirely -inf");
    }
    Scalar total = 0;
    for (Index c = 0; c < z.cols(); ++c) {
      const Scalar e = std::exp(z(r, c) - top);
      out(r, c) = e;
      total += e;
    }
    out.row(r) /= total;
  }
  const int ix = x.id();
  const int ib = bias ? bias->id() : -1;
  const int iy = static_cast<int>(x.graph().size());
  std::vector<int> parents{ix};
  if (ib >= 0) parents.push_back(ib);
  return x.graph().record(std::move(out), std::move(parents),
                          [ix, ib, iy, broadcast](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
                            const auto& y = g.value(iy);
                            const VectorX<Scalar> dots = dout.cwiseProduct(y).rowwise().sum();
                            MatrixX<Scalar> dz = y.cwiseProduct(dout - dots.replicate(1, y.cols()));
                            if (ib >= 0 && g.requires_grad(ib)) {
                              if (broadcast) g.accumulate_expr(ib, dz.colwise().sum());
                              else g.accumulate(ib, dz);
                            }
                            g.accumulate(ix, dz);
                          });
}

template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const auto& lv = logits.value();
  if (static_cast<Index>(targets.size()) != lv.rows() || static_cast<Index>(mask.size()) != lv.rows()) {
    throw ShapeError("cross_entropy: targets/mask length must equal logits rows " + std::to_string(lv.rows()));
  }
  const Index count = std::count(mask.begin(), mask.end(), true);
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  double total = 0.0;
  std::vector<double> lse(static_cast<size_t>(lv.rows()), 0.0);
  for (Index r = 0; r < lv.rows(); ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= lv.cols()) throw std::out_of_range("cross_entropy: target " + std::to_string(t));
    const double top = static_cast<double>(lv.row(r).maxCoeff());
    double acc = 0.0;
    for (Index c = 0; c < lv.cols(); ++c) acc += std::exp(static_cast<double>(lv(r, c)) - top);
    lse[static_cast<size_t>(r)] = top + std::log(acc);
    total += lse[static_cast<size_t>(r)] - static_cast<double>(lv(r, t));
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total / static_cast<double>(count));
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.graph().record(
      std::move(out), {il},
      [il, tg = std::move(tg), mask, lse = std::move(lse), count](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
        const auto& lv = g.value(il);
        MatrixX<Scalar> d = MatrixX<Scalar>::Zero(lv.rows(), lv.cols());
        const double w = static_cast<double>(dout(0, 0)) / static_cast<double>(count);
        for (Index r = 0; r < lv.rows(); ++r) {
          if (!mask[static_cast<size_t>(r)]) continue;
          for (Index c = 0; c < lv.cols(); ++c) {
            d(r, c) = static_cast<Scalar>(std::exp(static_cast<double>(lv(r, c)) - lse[static_cast<size_t>(r)]) * w);
          }
          d(r, tg[static_cast<size_t>(r)]) -= static_cast<Scalar>(w);
        }
        g.accumulate(il, d);
      });
}

// ---- attention --------------------------------------------------------------

template <typename Scalar>
Var<Scalar> causal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int n_heads,
                             const AttentionMasks<Scalar>& masks) {
  require_same_graph(q, k);
  require_same_graph(q, v);
  const Index len = q.rows();
  const Index width = q.cols();
  if (k.rows() != len || v.rows() != len || k.cols() != width || v.cols() != width) {
    throw ShapeError("causal_attention: q/k/v shapes differ");
  }
  if (n_heads <= 0 || width % n_heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
  if (masks.bias && (masks.bias->rows() != len || masks.bias->cols() != len)) {
    throw ShapeError("causal_attention: bias must be " + shape_string(len, len));
  }
  if (masks.hard && (masks.hard->rows() != len || masks.hard->cols() != len)) {
    throw ShapeError("causal_attention: hard mask must be " + shape_string(len, len));
  }
  const Index head_dim = width / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
  constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<MatrixX<Scalar>> probs(static_cast<size_t>(n_heads));
  MatrixX<Scalar> out(len, width);
  for (int h = 0; h < n_heads; ++h) {
    const Index c0 = h * head_dim;
    MatrixX<Scalar> s = (qv.middleCols(c0, head_dim) * kv.middleCols(c0, head_dim).transpose()) * inv_sqrt;
    if (masks.bias) s += masks.bias->value();
    if (masks.hard) s += *masks.hard;
    MatrixX<Scalar>& p = probs[static_cast<size_t>(h)];
    p.setZero(len, len);
    for (Index r = 0; r < len; ++r) {
      Scalar top = kNegInf;
      for (Index c = 0; c <= r; ++c) top = std::max(top, s(r, c));
      if (top == kNegInf) throw std::domain_error("causal_attention: row " + std::to_string(r) + " fully masked");
      Scalar total = 0;
      for (Index c = 0; c <= r; ++c) {
        const Scalar e = std::exp(s(r, c) - top);
        p(r, c) = e;
        total += e;
      }
      p.row(r).head(r + 1) /= total;
    }
    out.middleCols(c0, head_dim).noalias() = p * vv.middleCols(c0, head_dim);
  }

  if (masks.probe != nullptr && !masks.probe->rows.empty()) {
    Matrix rec = Matrix::Zero(static_cast<Index>(masks.probe->rows.size()), len);
    for (size_t i = 0; i < masks.probe->rows.size(); ++i) {
      const Index r = masks.probe->rows[i];
      for (const auto& p : probs) rec.row(static_cast<Index>(i)) += p.row(r).template cast<float>();
    }
    rec /= static_cast<float>(n_heads);
    masks.probe->per_layer.push_back(std::move(rec));
  }

  std::vector<int> parents{q.id(), k.id(), v.id()};
  const int ib = masks.bias ? masks.bias->id() : -1;
  if (ib >= 0) parents.push_back(ib);
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().record(
      std::move(out), std::move(parents),
      [iq, ik, iv, ib, n_heads, head_dim, inv_sqrt, probs = std::move(probs)](Graph<Scalar>& g,
                                                                              const MatrixX<Scalar>& dout) {
        const auto& qv = g.value(iq);
        const auto& kv = g.value(ik);
        const auto& vv = g.value(iv);
        const Index len = qv.rows();
        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(len, qv.cols());
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(len, qv.cols());
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(len, qv.cols());
        const bool want_bias = ib >= 0 && g.requires_grad(ib);
        MatrixX<Scalar> dbias;
        if (want_bias) dbias.setZero(len, len);
        for (int h = 0; h < n_heads; ++h) {
          const Index c0 = h * head_dim;
          const auto& p = probs[static_cast<size_t>(h)];
          const auto dout_h = dout.middleCols(c0, head_dim);
          MatrixX<Scalar> dp = dout_h * vv.middleCols(c0, head_dim).transpose();
          dv.middleCols(c0, head_dim).noalias() += p.transpose() * dout_h;
          const VectorX<Scalar> dots = dp.cwiseProduct(p).rowwise().sum();
          MatrixX<Scalar> ds = p.cwiseProduct(dp - dots.replicate(1, len));
          if (want_bias) dbias += ds;
          dq.middleCols(c0, head_dim).noalias() += (ds * kv.middleCols(c0, head_dim)) * inv_sqrt;
          dk.middleCols(c0, head_dim).noalias() += (ds.transpose() * qv.middleCols(c0, head_dim)) * inv_sqrt;
        }
        g.accumulate(iq, dq);
        g.accumulate(ik, dk);
        g.accumulate(iv, dv);
        if (want_bias) g.accumulate(ib, dbias);
      });
}

// ---- gradient check ---------------------------------------------------------

GradCheckReport finite_diff_check(const std::function<Var<double>(Graph<double>&)>& f,
                                  std::span<BasicParameter<double>* const> params, double eps) {
  if (!(eps > 1e-6 && eps < 1e-2)) throw std::invalid_argument("finite_diff_check: eps must lie in (1e-6, 1e-2)");
  for (auto* p : params) p->tensor.zero_grad();
  {
    Graph<double> g;
    auto loss = f(g);
    if (!std::isfinite(loss.item())) throw std::domain_error("finite_diff_check: non-finite loss");
    g.backward(loss);
  }
  auto evaluate = [&f]() {
    Graph<double> g;
    const double v = f(g).item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite loss");
    return v;
  };
  GradCheckReport report;
  for (auto* p : params) {
    const MatrixX<double> analytic = p->grad();
    auto& value = p->value();
    for (Index i = 0; i < value.size(); ++i) {
      const double orig = value.data()[i];
      value.data()[i] = orig + eps;
      const double up = evaluate();
      value.data()[i] = orig - eps;
      const double down = evaluate();
      value.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double err = std::abs(a - numeric) / denom;
      if (report.worst_index < 0 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p->name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
    p->tensor.zero_grad();
  }
  return report;
}

// ---- instantiations ---------------------------------------------------------

#define FLTLM_INSTANTIATE(S)                                                                                  \
  template class Graph<S>;                                                                                    \
  template Var<S> matmul(Var<S>, Var<S>);                                                                     \
  template Var<S> matmul_nt(Var<S>, Var<S>);                                                                  \
  template Var<S> add(Var<S>, Var<S>);                                                                        \
  template Var<S> sub(Var<S>, Var<S>);                                                                        \
  template Var<S> hadamard(Var<S>, Var<S>);                                                                   \
  template Var<S> add_row(Var<S>, Var<S>);                                                                    \
  template Var<S> mul_scalar(Var<S>, Var<S>);                                                                 \
  template Var<S> add_scalar(Var<S>, Var<S>);                                                                 \
  template Var<S> scale(Var<S>, S);                                                                           \
  template Var<S> shift(Var<S>, S);                                                                           \
  template Var<S> exp(Var<S>);                                                                                \
  template Var<S> min_zero(Var<S>);                                                                           \
  template Var<S> gelu(Var<S>);                                                                               \
  template Var<S> sum(Var<S>);                                                                                \
  template Var<S> square_sum(Var<S>);                                                                         \
  template Var<S> log1p_sum_exp(Var<S>);                                                                      \
  template Var<S> select_rows(Var<S>, std::span<const Index>);                                                \
  template Var<S> concat_rows(std::span<const Var<S>>);                                                       \
  template Var<S> embedding(Var<S>, std::span<const int>);                                                    \
  template Var<S> rms_norm(Var<S>, Var<S>, S);                                                                \
  template Var<S> rope(Var<S>, int, Index, S);                                                                \
  template Var<S> softmax_rows(Var<S>, std::optional<Var<S>>);                                                \
  template Var<S> cross_entropy(Var<S>, std::span<const int>, const std::vector<bool>&);                      \
  template Var<S> causal_attention(Var<S>, Var<S>, Var<S>, int, const AttentionMasks<S>&);

FLTLM_INSTANTIATE(float)
FLTLM_INSTANTIATE(double)

#undef FLTLM_INSTANTIATE

}  // namespace fltlm
