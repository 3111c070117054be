#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "metaforge/errors.hpp"

namespace metaforge {

using complex = std::complex<double>;

/// Dense row-major 2-D array. Rows run along y, columns along x.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data size " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  const std::vector<T>& storage() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using RealMatrix = Matrix<double>;
using ComplexMatrix = Matrix<complex>;

template <typename A, typename B>
void require_same_shape(const Matrix<A>& a, const Matrix<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// Reductions accumulate in long double: finite-difference checks difference
// two nearby losses, and double accumulation noise dominates that difference.
inline double sum(const RealMatrix& m) {
  long double acc = 0.0L;
  for (double v : m) acc += v;
  return static_cast<double>(acc);
}

inline double dot(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "dot");
  long double acc = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(acc);
}

inline double sum_squares(const RealMatrix& m) { return dot(m, m); }

inline bool all_finite(const RealMatrix& m) {
  return std::all_of(m.begin(), m.end(), [](double v) { return std::isfinite(v); });
}

inline bool all_finite(const ComplexMatrix& m) {
  return std::all_of(m.begin(), m.end(), [](const complex& v) {
    return std::isfinite(v.real()) && std::isfinite(v.imag());
  });
}

/// Central `h`×`w` window of `m`; the window origin is rows/2 - h/2 (integer division).
template <typename T>
Matrix<T> center_window(const Matrix<T>& m, std::size_t h, std::size_t w) {
  if (h > m.rows() || w > m.cols()) {
    throw BoundsError("window " + std::to_string(h) + "x" + std::to_string(w) +
                      " exceeds " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  const std::size_t r0 = m.rows() / 2 - h / 2;
  const std::size_t c0 = m.cols() / 2 - w / 2;
  Matrix<T> out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = m(r0 + r, c0 + c);
  return out;
}

/// 180-degree rotation (kernel flip between correlation and convolution).
template <typename T>
Matrix<T> rotate180(const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      out(m.rows() - 1 - r, m.cols() - 1 - c) = m(r, c);
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}

}  // namespace metaforge
