#ifndef TAGBERT_AUTODIFF_HPP
#define TAGBERT_AUTODIFF_HPP

// Matrix-level reverse-mode differentiation.
//
// A Tape records every operation of one forward pass as a node holding the
// result value and a closure that pushes the node's gradient to its inputs.
// Nodes are appended in topological order, so backward() is a single reverse
// sweep. Handles (Var) index into the tape; closures capture ids, never
// pointers, because the node vector may reallocate.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tagbert/error.hpp"
#include "tagbert/numerics.hpp"

namespace tagbert::ad {

using Eigen::Index;

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const MatrixX<Scalar>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Query boundaries inside a packed batch: query q owns rows
/// [offsets[q], offsets[q+1]).
struct Segments {
  std::vector<Index> offsets{0};

  static Segments from_lengths(std::span<const int> lengths) {
    Segments s;
    s.offsets.reserve(lengths.size() + 1);
    for (int len : lengths) {
      if (len <= 0) throw ArgumentError("Segments: non-positive length");
      s.offsets.push_back(s.offsets.back() + len);
    }
    return s;
  }

  Index count() const { return static_cast<Index>(offsets.size()) - 1; }
  Index start(Index q) const { return offsets[q]; }
  Index length(Index q) const { return offsets[q + 1] - offsets[q]; }
  Index total() const { return offsets.back(); }
  Index max_length() const {
    Index m = 0;
    for (Index q = 0; q < count(); ++q) m = std::max(m, length(q));
    return m;
  }
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Backward = std::function<void(Tape&, int self)>;

  Var<Scalar> constant(Matrix value) { return push(std::move(value), false, {}); }
  Var<Scalar> variable(Matrix value) { return push(std::move(value), true, {}); }

  /// Appends an operation result. The node needs a gradient iff any input
  /// does; otherwise the backward closure is discarded.
  Var<Scalar> record(Matrix value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Matrix& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward() root with respect to `v`.
  Matrix grad(Var<Scalar> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Accumulator for node `id`, zero-initialized on first touch.
  Matrix& grad_accum(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& upstream(int id) { return grad_accum(id); }

  /// Reverse sweep from a 1 x 1 root. Gradients from any previous sweep are
  /// discarded first, so repeated calls give identical results.
  void backward(Var<Scalar> root) {
    if (root.tape != this) throw ArgumentError("backward: variable from another tape");
    if (value(root).size() != 1) throw ArgumentError("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_accum(root.id).setOnes();
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() != 0) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var<Scalar> push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), requires_grad});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ArgumentError("autodiff: variables on different tapes");
}

template <typename Scalar>
void require_same_shape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ArgumentError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimension mismatch");
  Tape<Scalar>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.record(a.value() * b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_accum(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_accum(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_accum(ia) += g;
    if (t.requires_grad(ib)) t.grad_accum(ib) += g;
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_accum(ia) += g;
    if (t.requires_grad(ib)) t.grad_accum(ib) -= g;
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_accum(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad_accum(ib) += g.cwiseProduct(t.value(ia));
  });
}

/// a + row, with the 1 x n row broadcast down every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ArgumentError("add_row: bias shape mismatch");
  const int ia = a.id, ir = row.id;
  MatrixX<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [ia, ir](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_accum(ia) += g;
    if (t.requires_grad(ir)) t.grad_accum(ir) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  const int ia = a.id;
  return a.tape->record(a.value() * s, {a}, [ia, s](Tape<Scalar>& t, int self) {
    t.grad_accum(ia) += t.upstream(self) * s;
  });
}

template <typename Scalar>
Var<Scalar> one_minus(Var<Scalar> a) {
  const int ia = a.id;
  MatrixX<Scalar> out = (Scalar(1) - a.value().array()).matrix();
  return a.tape->record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    t.grad_accum(ia) -= t.upstream(self);
  });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  const int ia = a.id;
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) { return tagbert::gelu(x); });
  return a.tape->record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    const auto& x = t.value(ia);
    t.grad_accum(ia) +=
        t.upstream(self).cwiseProduct(x.unaryExpr([](Scalar v) { return gelu_derivative(v); }));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  const int ia = a.id;
  MatrixX<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  return a.tape->record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    const auto& s = t.value(self).array();
    t.grad_accum(ia).array() += t.upstream(self).array() * s * (Scalar(1) - s);
  });
}

/// Elementwise minimum; ties send the gradient to `a`.
template <typename Scalar>
Var<Scalar> cwise_min(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "cwise_min");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value().cwiseMin(b.value()), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self).array();
    const auto pick_a = (t.value(ia).array() <= t.value(ib).array()).template cast<Scalar>();
    if (t.requires_grad(ia)) t.grad_accum(ia).array() += g * pick_a;
    if (t.requires_grad(ib)) t.grad_accum(ib).array() += g * (Scalar(1) - pick_a);
  });
}

/// Elementwise maximum; ties send the gradient to `a`.
template <typename Scalar>
Var<Scalar> cwise_max(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "cwise_max");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value().cwiseMax(b.value()), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self).array();
    const auto pick_a = (t.value(ia).array() >= t.value(ib).array()).template cast<Scalar>();
    if (t.requires_grad(ia)) t.grad_accum(ia).array() += g * pick_a;
    if (t.requires_grad(ib)) t.grad_accum(ib).array() += g * (Scalar(1) - pick_a);
  });
}

/// Embedding lookup: row r of the result is table.row(ids[r]).
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::vector<int> ids) {
  const auto& tv = table.value();
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tv.rows())
      throw ArgumentError("gather_rows: id " + std::to_string(ids[r]) + " out of range");
    out.row(static_cast<Index>(r)) = tv.row(ids[r]);
  }
  const int it = table.id;
  return table.tape->record(std::move(out), {table},
                            [it, ids = std::move(ids)](Tape<Scalar>& t, int self) {
                              const auto& g = t.upstream(self);
                              auto& acc = t.grad_accum(it);
                              for (std::size_t r = 0; r < ids.size(); ++r)
                                acc.row(ids[r]) += g.row(static_cast<Index>(r));
                            });
}

/// Broadcasts an N x 1 column to N x n.
template <typename Scalar>
Var<Scalar> repeat_cols(Var<Scalar> a, Index n) {
  if (a.cols() != 1) throw ArgumentError("repeat_cols: input must be a column");
  const int ia = a.id;
  MatrixX<Scalar> out = a.value().replicate(1, n);
  return a.tape->record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    t.grad_accum(ia) += t.upstream(self).rowwise().sum();
  });
}

/// Row-wise normalization with affine parameters that are either 1 x 1
/// scalars or 1 x d per-dimension rows:
///   y = gamma * (x - mean) / sqrt(var + eps) + beta
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const Index d = x.cols();
  const bool scalar_affine = gamma.cols() == 1;
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != beta.cols() ||
      (!scalar_affine && gamma.cols() != d))
    throw ArgumentError("layer_norm: affine parameter shape mismatch");
  if (!(eps > 0)) throw ArgumentError("layer_norm: eps must be positive");

  const auto& xv = x.value();
  MatrixX<Scalar> xhat(xv.rows(), d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    xhat.row(r) = xv.row(r).array() - mu;
    const Scalar var = xhat.row(r).squaredNorm() / Scalar(d);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) *= inv_std(r);
  }
  MatrixX<Scalar> out(xv.rows(), d);
  if (scalar_affine) {
    out = (xhat.array() * gamma.value()(0, 0) + beta.value()(0, 0)).matrix();
  } else {
    out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
  }

  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, scalar_affine, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<Scalar>& t, int self) {
        const auto& g = t.upstream(self);
        if (t.requires_grad(ig)) {
          if (scalar_affine)
            t.grad_accum(ig)(0, 0) += g.cwiseProduct(xhat).sum();
          else
            t.grad_accum(ig) += g.cwiseProduct(xhat).colwise().sum();
        }
        if (t.requires_grad(ib)) {
          if (scalar_affine)
            t.grad_accum(ib)(0, 0) += g.sum();
          else
            t.grad_accum(ib) += g.colwise().sum();
        }
        if (t.requires_grad(ix)) {
          MatrixX<Scalar> dxhat = scalar_affine
                                      ? MatrixX<Scalar>(g * t.value(ig)(0, 0))
                                      : MatrixX<Scalar>(g.array().rowwise() * t.value(ig).row(0).array());
          auto& acc = t.grad_accum(ix);
          for (Index r = 0; r < g.rows(); ++r) {
            const Scalar mean_d = dxhat.row(r).sum() / Scalar(d);
            const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / Scalar(d);
            acc.row(r).array() +=
                inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
          }
        }
      });
}

/// Row-wise softmax.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  const auto& av = a.value();
  MatrixX<Scalar> p(av.rows(), av.cols());
  for (Index r = 0; r < av.rows(); ++r) p.row(r) = tagbert::softmax_row(av.row(r));
  const int ia = a.id;
  return a.tape->record(std::move(p), {a}, [ia](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    const auto& p = t.value(self);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.cwiseProduct(p).rowwise().sum();
    t.grad_accum(ia).array() += p.array() * (g.colwise() - dots).array();
  });
}

/// Weighted cross-entropy of row distributions against integer classes:
///   loss = -sum_r weights[r] * log max(p[r, classes[r]], floor)
/// Returned as a 1 x 1 node.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> p, std::vector<int> classes, std::vector<Scalar> weights) {
  const auto& pv = p.value();
  if (static_cast<Index>(classes.size()) != pv.rows() || classes.size() != weights.size())
    throw ArgumentError("cross_entropy: target length mismatch");
  Scalar loss = 0;
  for (Index r = 0; r < pv.rows(); ++r) {
    if (classes[r] < 0 || classes[r] >= pv.cols()) throw ArgumentError("cross_entropy: class out of range");
    loss -= weights[r] * std::log(std::max(pv(r, classes[r]), Scalar(kLogFloor)));
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = loss;
  const int ip = p.id;
  return p.tape->record(std::move(out), {p},
                        [ip, classes = std::move(classes), weights = std::move(weights)](Tape<Scalar>& t,
                                                                                         int self) {
                          const Scalar g = t.upstream(self)(0, 0);
                          const auto& pv = t.value(ip);
                          auto& acc = t.grad_accum(ip);
                          for (Index r = 0; r < pv.rows(); ++r) {
                            const Scalar pr = pv(r, classes[r]);
                            if (pr > Scalar(kLogFloor)) acc(r, classes[r]) -= g * weights[r] / pr;
                          }
                        });
}

/// Sum of all entries as a 1 x 1 node.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    t.grad_accum(ia).array() += t.upstream(self)(0, 0);
  });
}

/// Multiplies by a fixed mask (already scaled for inverted dropout).
template <typename Scalar>
Var<Scalar> apply_mask(Var<Scalar> a, MatrixX<Scalar> mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw ArgumentError("apply_mask: shape mismatch");
  const int ia = a.id;
  MatrixX<Scalar> out = a.value().cwiseProduct(mask);
  return a.tape->record(std::move(out), {a}, [ia, mask = std::move(mask)](Tape<Scalar>& t, int self) {
    t.grad_accum(ia) += t.upstream(self).cwiseProduct(mask);
  });
}

/// Per-query softmax of scaled dot products, in packed layout: for query q
/// with rows [s, s+L), entry (s+i, j) = softmax_j(scale * q_{s+i} . k_{s+j})
/// for j < L and 0 for j >= L. Result is total x max_length.
template <typename Scalar>
Var<Scalar> segment_softmax(Var<Scalar> q, Var<Scalar> k, const Segments& seg, Scalar scale) {
  detail::require_same_shape(q, k, "segment_softmax");
  if (q.rows() != seg.total()) throw ArgumentError("segment_softmax: row count does not match segments");
  const Index width = seg.max_length();
  const auto& qv = q.value();
  const auto& kv = k.value();
  MatrixX<Scalar> probs = MatrixX<Scalar>::Zero(seg.total(), width);
  for (Index s = 0; s < seg.count(); ++s) {
    const Index st = seg.start(s), len = seg.length(s);
    MatrixX<Scalar> scores = scale * (qv.middleRows(st, len) * kv.middleRows(st, len).transpose());
    for (Index i = 0; i < len; ++i) probs.row(st + i).head(len) = tagbert::softmax_row(scores.row(i));
  }
  const int iq = q.id, ik = k.id;
  return q.tape->record(std::move(probs), {q, k}, [iq, ik, seg, scale](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    const auto& p = t.value(self);
    const auto& qv = t.value(iq);
    const auto& kv = t.value(ik);
    const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik);
    for (Index s = 0; s < seg.count(); ++s) {
      const Index st = seg.start(s), len = seg.length(s);
      const auto ps = p.block(st, 0, len, len);
      const auto gs = g.block(st, 0, len, len);
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = gs.cwiseProduct(ps).rowwise().sum();
      MatrixX<Scalar> dscore = (ps.array() * (gs.colwise() - dots).array()).matrix() * scale;
      if (need_q) t.grad_accum(iq).middleRows(st, len).noalias() += dscore * kv.middleRows(st, len);
      if (need_k) t.grad_accum(ik).middleRows(st, len).noalias() += dscore.transpose() * qv.middleRows(st, len);
    }
  });
}

/// Edge-weighted multi-head attention over packed queries.
///
/// Columns of q/k/v split evenly into `heads` blocks. Within query q (rows
/// [s, s+L)) and head h:
///   alpha_ij = w_ij exp(a_ij) / sum_l w_il exp(a_il),  a_ij = scale * q_i . k_j
///   out_i    = sum_j alpha_ij v_j
/// where w is the packed total x max_length `weights` (shared by all heads).
/// Zero weights mask a pair out entirely; 0/1 weights give hard masking.
/// When `probs_out` is non-null it receives the packed attention
/// probabilities, total x (heads * max_length).
template <typename Scalar>
Var<Scalar> segment_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Var<Scalar> weights,
                              const Segments& seg, Index heads, Scalar scale,
                              MatrixX<Scalar>* probs_out = nullptr) {
  detail::require_same_shape(q, k, "segment_attention");
  detail::require_same_tape(q, v);
  detail::require_same_tape(q, weights);
  const Index width = seg.max_length();
  if (q.rows() != seg.total() || v.rows() != seg.total())
    throw ArgumentError("segment_attention: row count does not match segments");
  if (weights.rows() != seg.total() || weights.cols() < width)
    throw ArgumentError("segment_attention: weight matrix shape mismatch");
  if (heads < 1 || q.cols() % heads != 0 || v.cols() % heads != 0)
    throw ArgumentError("segment_attention: columns not divisible by head count");

  const Index dk = q.cols() / heads, dv = v.cols() / heads;
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const auto& wv = weights.value();

  // normalized exponentials exp(a_ij - m_i) / Z_i, so alpha = w * expn
  MatrixX<Scalar> expn = MatrixX<Scalar>::Zero(seg.total(), heads * width);
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(seg.total(), v.cols());
  for (Index s = 0; s < seg.count(); ++s) {
    const Index st = seg.start(s), len = seg.length(s);
    const auto w = wv.block(st, 0, len, len);
    for (Index h = 0; h < heads; ++h) {
      MatrixX<Scalar> a = scale * (qv.block(st, h * dk, len, dk) * kv.block(st, h * dk, len, dk).transpose());
      MatrixX<Scalar> alpha(len, len);
      for (Index i = 0; i < len; ++i) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        bool any = false;
        for (Index j = 0; j < len; ++j)
          if (w(i, j) > 0) {
            any = true;
            m = std::max(m, a(i, j));
          }
        if (!any)
          throw NumericError("segment_attention: row " + std::to_string(st + i) + " has no positive edge weight");
        if (!std::isfinite(m) || !a.row(i).allFinite())
          throw NumericError("segment_attention: non-finite score in row " + std::to_string(st + i));
        Scalar z = 0;
        for (Index j = 0; j < len; ++j) {
          const Scalar e = std::exp(a(i, j) - m);
          a(i, j) = e;
          z += w(i, j) * e;
        }
        a.row(i) /= z;
        alpha.row(i) = w.row(i).cwiseProduct(a.row(i));
      }
      expn.block(st, h * width, len, len) = a;
      out.block(st, h * dv, len, dv).noalias() = alpha * vv.block(st, h * dv, len, dv);
    }
  }
  if (probs_out) {
    probs_out->setZero(seg.total(), heads * width);
    for (Index s = 0; s < seg.count(); ++s) {
      const Index st = seg.start(s), len = seg.length(s);
      for (Index h = 0; h < heads; ++h)
        probs_out->block(st, h * width, len, len) =
            wv.block(st, 0, len, len).cwiseProduct(expn.block(st, h * width, len, len));
    }
  }

  const int iq = q.id, ik = k.id, iv = v.id, iw = weights.id;
  return q.tape->record(
      std::move(out), {q, k, v, weights},
      [iq, ik, iv, iw, seg, heads, scale, dk, dv, width, expn = std::move(expn)](Tape<Scalar>& t, int self) {
        const auto& g = t.upstream(self);
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        const auto& wv = t.value(iw);
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik);
        const bool need_v = t.requires_grad(iv), need_w = t.requires_grad(iw);
        for (Index s = 0; s < seg.count(); ++s) {
          const Index st = seg.start(s), len = seg.length(s);
          const auto w = wv.block(st, 0, len, len);
          for (Index h = 0; h < heads; ++h) {
            const auto e = expn.block(st, h * width, len, len);
            const MatrixX<Scalar> alpha = w.cwiseProduct(e);
            const auto gs = g.block(st, h * dv, len, dv);
            const MatrixX<Scalar> dalpha = gs * vv.block(st, h * dv, len, dv).transpose();
            if (need_v) t.grad_accum(iv).block(st, h * dv, len, dv).noalias() += alpha.transpose() * gs;
            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dalpha.cwiseProduct(alpha).rowwise().sum();
            const MatrixX<Scalar> centered = dalpha.colwise() - dots;
            if (need_w) t.grad_accum(iw).block(st, 0, len, len) += centered.cwiseProduct(e);
            if (need_q || need_k) {
              const MatrixX<Scalar> da = alpha.cwiseProduct(centered) * scale;
              if (need_q)
                t.grad_accum(iq).block(st, h * dk, len, dk).noalias() += da * kv.block(st, h * dk, len, dk);
              if (need_k)
                t.grad_accum(ik).block(st, h * dk, len, dk).noalias() +=
                    da.transpose() * qv.block(st, h * dk, len, dk);
            }
          }
        }
      });
}

}  // namespace tagbert::ad

#endif  // TAGBERT_AUTODIFF_HPP
