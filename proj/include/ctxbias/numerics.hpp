#pragma once

#include <cmath>

#include <Eigen/Core>

namespace ctxbias {

// Row views over column-major matrices have a nonunit inner stride, so the
// row helpers below take stride-tolerant references.
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;
using ConstRowRef = Eigen::Ref<const Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

inline double logsumexp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  return m + std::log((v.array() - m).exp().sum());
}

/// In-place stable log-softmax over the leading `n` entries of a row; the
/// remaining entries are left untouched.
inline void log_softmax_head(RowRef row, Eigen::Index n) {
  auto head = row.head(n);
  const double m = head.maxCoeff();
  const double lse = m + std::log((head.array() - m).exp().sum());
  head.array() -= lse;
}

/// In-place stable softmax over the leading `n` entries of a row; the rest is
/// zeroed so masked positions contribute nothing downstream.
inline void softmax_head(RowRef row, Eigen::Index n) {
  auto head = row.head(n);
  const double m = head.maxCoeff();
  head = (head.array() - m).exp().matrix();
  head /= head.sum();
  if (n < row.size()) row.tail(row.size() - n).setZero();
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

/// Backward through one softmax row: given the softmax output `w` and the
/// gradient `dw` arriving on it, returns the gradient on the raw scores.
inline Eigen::RowVectorXd softmax_backward(const ConstRowRef& w, const ConstRowRef& dw) {
  const double dot = (w.array() * dw.array()).sum();
  return (w.array() * (dw.array() - dot)).matrix();
}

}  // namespace ctxbias
