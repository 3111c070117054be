#pragma once

#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

#include "metaforge/matrix.hpp"

namespace metaforge::fft {

enum class Direction { forward, inverse };

namespace detail {

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const noexcept { fftw_destroy_plan(p); }
};
using PlanHandle = std::unique_ptr<fftw_plan_s, PlanDeleter>;

// The FFTW planner is not thread-safe; executing an existing plan on new
// arrays is. Plans are estimated (deterministic) and alignment-agnostic so
// every thread gets bit-identical results regardless of buffer placement.
inline fftw_plan cached_plan(std::size_t rows, std::size_t cols, Direction dir) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, int>, PlanHandle> plans;
  std::lock_guard lock(mu);
  const auto key = std::make_tuple(rows, cols, dir == Direction::forward ? -1 : 1);
  if (auto it = plans.find(key); it != plans.end()) return it->second.get();
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * rows * cols));
  fftw_plan p = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), buf, buf,
                                 dir == Direction::forward ? FFTW_FORWARD : FFTW_BACKWARD,
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
  fftw_free(buf);
  plans.emplace(key, PlanHandle(p));
  return p;
}

}  // namespace detail

/// In-place unitary 2-D DFT (scaled by 1/sqrt(rows*cols)).
inline void transform(ComplexMatrix& m, Direction dir) {
  if (m.empty()) return;
  fftw_plan p = detail::cached_plan(m.rows(), m.cols(), dir);
  auto* data = reinterpret_cast<fftw_complex*>(m.data());
  fftw_execute_dft(p, data, data);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m.size()));
  for (auto& v : m) v *= scale;
}

/// Moves the zero-frequency sample from index 0 to index n/2 on both axes.
template <typename T>
Matrix<T> fftshift(const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  const std::size_t hr = m.rows() / 2, hc = m.cols() / 2;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const std::size_t rr = (r + hr) % m.rows();
    for (std::size_t c = 0; c < m.cols(); ++c) out(rr, (c + hc) % m.cols()) = m(r, c);
  }
  return out;
}

/// Inverse of fftshift.
template <typename T>
Matrix<T> ifftshift(const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  const std::size_t hr = m.rows() / 2, hc = m.cols() / 2;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const std::size_t rr = (r + hr) % m.rows();
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(rr, (c + hc) % m.cols());
  }
  return out;
}

}  // namespace metaforge::fft
