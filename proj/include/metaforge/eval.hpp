#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "metaforge/errors.hpp"
#include "metaforge/matrix.hpp"

namespace metaforge {

struct KernelMatchReport {
  double ncc = 0.0;  // NaN when undefined (constant input)
  double rmse = 0.0;
  double mae = 0.0;

  bool ncc_defined() const noexcept { return std::isfinite(ncc); }
};

struct DepthMetricReport {
  double absrel = 0.0;
  double sqrel = 0.0;
  double rmse_m = 0.0;
  double rms_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
};

/// Zero-mean normalized cross correlation. Returns NaN if either input is constant.
inline double normalized_cross_correlation(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "ncc");
  const double n = static_cast<double>(a.size());
  const double ma = sum(a) / n, mb = sum(b) / n;
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    ab += da * db;
    aa += da * da;
    bb += db * db;
  }
  if (aa <= 0.0 || bb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// NCC plus RMSE/MAE of the unit-L2-normalized kernels. An all-zero input is
/// compared unnormalized.
inline KernelMatchReport kernel_metrics(const RealMatrix& realized, const RealMatrix& target) {
  require_same_shape(realized, target, "kernel_metrics");
  if (realized.empty()) throw ShapeError("kernel_metrics on empty kernels");
  KernelMatchReport r;
  r.ncc = normalized_cross_correlation(realized, target);
  const double na = std::sqrt(sum_squares(realized));
  const double nb = std::sqrt(sum_squares(target));
  const double sa = na > 0.0 ? 1.0 / na : 1.0;
  const double sb = nb > 0.0 ? 1.0 / nb : 1.0;
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < realized.size(); ++i) {
    const double d = realized[i] * sa - target[i] * sb;
    se += d * d;
    ae += std::abs(d);
  }
  const double n = static_cast<double>(realized.size());
  r.rmse = std::sqrt(se / n);
  r.mae = ae / n;
  return r;
}

/// Arithmetic means; NCC is averaged over the reports where it is defined.
inline KernelMatchReport layer_metrics(const std::vector<KernelMatchReport>& reports) {
  if (reports.empty()) throw ValidationError("layer_metrics needs at least one report");
  KernelMatchReport m;
  double ncc_sum = 0.0;
  std::size_t ncc_count = 0;
  for (const auto& r : reports) {
    if (r.ncc_defined()) {
      ncc_sum += r.ncc;
      ++ncc_count;
    }
    m.rmse += r.rmse;
    m.mae += r.mae;
  }
  const double n = static_cast<double>(reports.size());
  m.ncc = ncc_count ? ncc_sum / static_cast<double>(ncc_count) : std::numeric_limits<double>::quiet_NaN();
  m.rmse /= n;
  m.mae /= n;
  return m;
}

/// Standard monocular-depth metrics over the pixels where `mask` is non-zero.
inline DepthMetricReport depth_metrics(const RealMatrix& pred, const RealMatrix& gt,
                                       const RealMatrix& mask) {
  require_same_shape(pred, gt, "depth_metrics pred/gt");
  require_same_shape(pred, mask, "depth_metrics mask");
  DepthMetricReport r;
  std::size_t n = 0;
  double absrel = 0, sqrel = 0, se = 0, sl = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double p = pred[i], g = gt[i];
    if (!(p > 0.0) || !(g > 0.0) || !std::isfinite(p) || !std::isfinite(g))
      throw ValidationError("depths must be positive and finite inside the mask");
    const double d = p - g;
    absrel += std::abs(d) / g;
    sqrel += d * d / g;
    se += d * d;
    const double dl = std::log(p) - std::log(g);
    sl += dl * dl;
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < t1;
    d2 += ratio < t2;
    d3 += ratio < t3;
    ++n;
  }
  if (n == 0) throw ValidationError("depth mask selects no pixels");
  const double nn = static_cast<double>(n);
  r.absrel = absrel / nn;
  r.sqrel = sqrel / nn;
  r.rmse_m = std::sqrt(se / nn);
  r.rms_log = std::sqrt(sl / nn);
  r.delta1 = static_cast<double>(d1) / nn;
  r.delta2 = static_cast<double>(d2) / nn;
  r.delta3 = static_cast<double>(d3) / nn;
  return r;
}

}  // namespace metaforge
