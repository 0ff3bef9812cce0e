#pragma once

// Dense numeric kernels shared by the differentiable ops and by callers that
// only need values (evaluation, diagnostics). Everything here is templated on
// the scalar type through Eigen expressions; nothing records onto a tape.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

namespace anyshift::kernels {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-wise softmax with max subtraction.
template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Row-wise log-softmax, stable for large logits.
template <typename Derived>
RowMatrix<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  return out;
}

/// Backward of a row softmax: given y = softmax(x) and dL/dy, returns dL/dx.
template <typename DerivedY, typename DerivedG>
RowMatrix<typename DerivedY::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DerivedY>& y,
                                                           const Eigen::MatrixBase<DerivedG>& dy) {
  using Scalar = typename DerivedY::Scalar;
  RowMatrix<Scalar> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const Scalar dot = y.row(r).dot(dy.row(r));
    dx.row(r) = (y.row(r).array() * (dy.row(r).array() - dot)).matrix();
  }
  return dx;
}

// tanh approximation of GELU, as used by GPT-style transformer blocks.
template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar inner = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = c * (Scalar(1) + Scalar(3) * Scalar(0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

/// Per-row standardization: fills `normalized` and `inv_std` for reuse by
/// the backward pass. eps sits inside the square root.
template <typename Derived, typename Scalar = typename Derived::Scalar>
void standardize_rows(const Eigen::MatrixBase<Derived>& x, Scalar eps, RowMatrix<Scalar>& normalized,
                      Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& inv_std) {
  const auto d = static_cast<Scalar>(x.cols());
  normalized.resize(x.rows(), x.cols());
  inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / d;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / d;
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    normalized.row(r) = (centered * inv_std(r)).matrix();
  }
}

/// KL(N(mu_q, exp(lv_q)) || N(mu_p, exp(lv_p))) summed over all elements.
template <typename D1, typename D2, typename D3, typename D4>
typename D1::Scalar kl_diag(const Eigen::MatrixBase<D1>& mu_q, const Eigen::MatrixBase<D2>& lv_q,
                            const Eigen::MatrixBase<D3>& mu_p, const Eigen::MatrixBase<D4>& lv_p) {
  using Scalar = typename D1::Scalar;
  const auto diff = (mu_q - mu_p).array();
  const auto terms = (lv_p - lv_q).array() + ((lv_q - lv_p).array().exp()) +
                     diff.square() * (-lv_p.array()).exp() - Scalar(1);
  return Scalar(0.5) * terms.sum();
}

/// Sum of element-wise diagonal Gaussian log densities.
template <typename D1, typename D2, typename D3>
typename D1::Scalar diag_log_prob(const Eigen::MatrixBase<D1>& mean, const Eigen::MatrixBase<D2>& log_var,
                                  const Eigen::MatrixBase<D3>& x) {
  using Scalar = typename D1::Scalar;
  const Scalar log_2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  const auto diff = (x - mean).array();
  return Scalar(-0.5) * (log_2pi + log_var.array() + diff.square() * (-log_var.array()).exp()).sum();
}

/// 2ab/(a+b), defined as 0 when both inputs are 0.
template <typename Scalar>
Scalar harmonic_mean(Scalar a, Scalar b) {
  if (a + b == Scalar(0)) return Scalar(0);
  return Scalar(2) * a * b / (a + b);
}

/// Rows scaled to unit L2 norm.
template <typename Derived>
RowMatrix<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& x) {
  RowMatrix<typename Derived::Scalar> out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).norm();
  return out;
}

}  // namespace anyshift::kernels
