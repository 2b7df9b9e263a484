#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "macrec/error.hpp"

namespace macrec {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. Rank 0 (scalar), 1 or 2 in practice; the kernels
// below treat a rank-1 tensor as a single row.
template <class Real>
struct BasicTensor {
  Shape shape;
  std::vector<Real> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, Real fill = Real(0)) : shape(std::move(s)), data(shape_size(shape), fill) {}
  BasicTensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape))
      throw ShapeError("tensor", "values length " + std::to_string(data.size()) + " != product of " +
                                     shape_str(shape));
  }

  static BasicTensor scalar(Real v) { return BasicTensor(Shape{}, std::vector<Real>{v}); }
  static BasicTensor matrix(std::size_t r, std::size_t c, Real fill = Real(0)) {
    return BasicTensor(Shape{r, c}, fill);
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const noexcept {
    return shape.size() >= 2 ? shape_size(Shape(shape.begin(), shape.end() - 1)) : 1;
  }
  std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  Real item() const { return data.at(0); }

  std::span<Real> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](Real v) { return std::isfinite(v); });
  }

  template <class Other>
  BasicTensor<Other> cast() const {
    BasicTensor<Other> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using Tensor = BasicTensor<float>;

namespace kernels {

template <class Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (m x n) += A (m x k) * B (k x n).
template <class Real>
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMatrix<Real>>(c, ei(m), ei(n)).noalias() +=
      Eigen::Map<const RowMatrix<Real>>(a, ei(m), ei(k)) * Eigen::Map<const RowMatrix<Real>>(b, ei(k), ei(n));
}

// C (k x n) += A^T * B with A (m x k), B (m x n).
template <class Real>
void gemm_tn_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMatrix<Real>>(c, ei(k), ei(n)).noalias() +=
      Eigen::Map<const RowMatrix<Real>>(a, ei(m), ei(k)).transpose() * Eigen::Map<const RowMatrix<Real>>(b, ei(m), ei(n));
}

// C (m x n) += A (m x k) * B^T with B (n x k).
template <class Real>
void gemm_nt_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMatrix<Real>>(c, ei(m), ei(n)).noalias() +=
      Eigen::Map<const RowMatrix<Real>>(a, ei(m), ei(k)) * Eigen::Map<const RowMatrix<Real>>(b, ei(n), ei(k)).transpose();
}

template <class Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class Real>
Real squared_distance(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Numerically stable in-place log-softmax of one row.
template <class Real>
void log_softmax_row(std::span<Real> x) {
  const Real mx = *std::max_element(x.begin(), x.end());
  Real s = 0;
  for (Real v : x) s += std::exp(v - mx);
  const Real log_s = std::log(s);
  for (Real& v : x) v = (v - mx) - log_s;
}

}  // namespace kernels

}  // namespace macrec
