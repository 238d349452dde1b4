#ifndef TAGBERT_NUMERICS_HPP
#define TAGBERT_NUMERICS_HPP

// Dense primitives shared by the model and its tests. Everything here is a
// pure function over Eigen expressions, templated on the scalar type.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>

#include "tagbert/error.hpp"

namespace tagbert {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Row-major 2-D tensor of doubles. Vectors are stored as 1 x n rows.
using Tensor = MatrixX<double>;
using RowVector = RowVectorX<double>;

/// Lower clamp applied to probabilities before taking a log.
inline constexpr double kLogFloor = 1e-12;

/// Which denominator the Add&Norm step uses. `literal` divides by
/// (variance + eps) without the square root; it exists only so tests can
/// compare the two readings of the normalization formula.
enum class NormStyle { standard, literal };

template <typename Derived>
void check_finite(const Eigen::DenseBase<Derived>& x, const std::string& what) {
  if (!x.allFinite()) throw NumericError(what + ": non-finite value");
}

/// Numerically stable softmax of a single row (max subtracted first).
template <typename Derived>
RowVectorX<typename Derived::Scalar> softmax_row(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw ArgumentError("softmax_row: empty input");
  check_finite(v, "softmax_row");
  RowVectorX<Scalar> row = v.reshaped().transpose();
  row.array() -= row.maxCoeff();
  row = row.array().exp();
  return row / row.sum();
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename Scalar>
Scalar gelu(Scalar x) {
  if (!std::isfinite(x)) throw NumericError("gelu: non-finite input");
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
  return cdf + x * Scalar(kInvSqrt2Pi) * std::exp(Scalar(-0.5) * x * x);
}

/// Add&Norm with a residual outside the normalization:
///   out = residual + gamma * (o - mean(o)) / sqrt(var(o) + eps) + beta
/// with population variance. `literal` drops the square root.
template <typename DerivedO, typename DerivedV>
RowVectorX<typename DerivedO::Scalar> layer_norm(const Eigen::MatrixBase<DerivedO>& o,
                                                 const Eigen::MatrixBase<DerivedV>& residual,
                                                 typename DerivedO::Scalar gamma,
                                                 typename DerivedO::Scalar beta,
                                                 typename DerivedO::Scalar eps,
                                                 NormStyle style = NormStyle::standard) {
  using Scalar = typename DerivedO::Scalar;
  if (o.size() == 0 || o.size() != residual.size())
    throw ArgumentError("layer_norm: length mismatch");
  if (!(eps > 0)) throw ArgumentError("layer_norm: eps must be positive");
  check_finite(o, "layer_norm");
  RowVectorX<Scalar> centered = o.reshaped().transpose();
  centered.array() -= centered.mean();
  const Scalar var = centered.squaredNorm() / Scalar(centered.size());
  const Scalar denom = style == NormStyle::standard ? std::sqrt(var + eps) : var + eps;
  RowVectorX<Scalar> out = residual.reshaped().transpose();
  out.array() += gamma * centered.array() / denom + beta;
  return out;
}

/// Mean categorical cross-entropy of an M x K probability matrix against
/// one-hot targets: -(1/M) sum_ij c_ij log max(p_ij, floor).
template <typename DerivedP, typename DerivedC>
typename DerivedP::Scalar cross_entropy(const Eigen::MatrixBase<DerivedP>& p,
                                        const Eigen::MatrixBase<DerivedC>& c) {
  using Scalar = typename DerivedP::Scalar;
  if (p.rows() != c.rows() || p.cols() != c.cols() || p.rows() == 0)
    throw ArgumentError("cross_entropy: shape mismatch");
  check_finite(p, "cross_entropy");
  Scalar total = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (std::abs(p.row(i).sum() - Scalar(1)) > Scalar(1e-6) || (p.row(i).array() < 0).any())
      throw ArgumentError("cross_entropy: row " + std::to_string(i) + " is not a distribution");
    int ones = 0;
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (c(i, j) == Scalar(1)) {
        ++ones;
        total -= std::log(std::max(p(i, j), Scalar(kLogFloor)));
      } else if (c(i, j) != Scalar(0)) {
        ones = -1;
        break;
      }
    }
    if (ones != 1)
      throw ArgumentError("cross_entropy: target row " + std::to_string(i) + " is not one-hot");
  }
  return total / Scalar(p.rows());
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename Scalar>
MatrixX<Scalar> finite_diff_grad(const std::function<Scalar(const MatrixX<Scalar>&)>& f,
                                 const MatrixX<Scalar>& x, Scalar h) {
  if (!(h > 0)) throw ArgumentError("finite_diff_grad: step must be positive");
  MatrixX<Scalar> grad(x.rows(), x.cols());
  MatrixX<Scalar> probe = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const Scalar orig = probe.data()[k];
    probe.data()[k] = orig + h;
    const Scalar up = f(probe);
    probe.data()[k] = orig - h;
    const Scalar down = f(probe);
    probe.data()[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite function value");
    grad.data()[k] = (up - down) / (Scalar(2) * h);
  }
  return grad;
}

}  // namespace tagbert

#endif  // TAGBERT_NUMERICS_HPP
