#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "metaforge/kernels.hpp"
#include "metaforge/propagate.hpp"

namespace metaforge {

struct DkoLossReport {
  double loss = 0.0;
  double gain = 0.0;
  RealMatrix residual;  // gain·psf − target on the full sensor grid
};

/// ∂loss/∂φ with the gain held at its fitted value.
struct PhaseGradient {
  GridSpec grid;
  RealMatrix values;
};

/// Precomputed per-(grid, optics) state for repeated loss/gradient evaluations.
class DkoProblem {
 public:
  DkoProblem(ApertureMask aperture, OpticalConfig optics, PropagationOptions opts = {})
      : aperture_(std::move(aperture)), optics_(optics), opts_(opts) {
    optics_.validate();
    chirp_ = fresnel_chirp(aperture_.grid, optics_);
    sensor_ = sensor_grid(aperture_.grid, optics_, opts_);
  }

  const ApertureMask& aperture() const noexcept { return aperture_; }
  const GridSpec& grid() const noexcept { return aperture_.grid; }
  const OpticalConfig& optics() const noexcept { return optics_; }
  const SensorGrid& sensor() const noexcept { return sensor_; }
  const PropagationOptions& options() const noexcept { return opts_; }

  FresnelForward forward(const PhaseProfile& phase) const {
    require_same_grid(phase.grid, aperture_.grid, "dko phase");
    return fresnel_forward(make_modulation(phase, aperture_), chirp_, sensor_);
  }

  void check_target(const EmbeddedTarget& t) const {
    if (t.values.rows() != sensor_.n_v || t.values.cols() != sensor_.n_u)
      throw ShapeError("target is not on the simulator sensor grid");
  }

 private:
  ApertureMask aperture_;
  OpticalConfig optics_;
  PropagationOptions opts_;
  ComplexMatrix chirp_;
  SensorGrid sensor_;
};

/// Closed-form least-squares gain shared by several (psf, target) pairs, clamped at 0.
inline double fit_shared_gain(std::span<const RealMatrix* const> psfs,
                              std::span<const RealMatrix* const> targets) {
  long double ht = 0.0L, hh = 0.0L;
  for (std::size_t i = 0; i < psfs.size(); ++i) {
    ht += dot(*psfs[i], *targets[i]);
    hh += sum_squares(*psfs[i]);
  }
  if (hh <= 0.0L) return 0.0;
  return std::max(0.0, static_cast<double>(ht / hh));
}

/// Loss and gradient for one metasurface at a given gain.
struct DkoEvaluation {
  double loss = 0.0;
  RealMatrix residual;
  RealMatrix gradient;
};

inline DkoEvaluation evaluate_at_gain(const DkoProblem& problem, const FresnelForward& fw,
                                      const EmbeddedTarget& target, double gain, bool with_gradient) {
  DkoEvaluation ev;
  const RealMatrix& h = fw.psf.values;
  ev.residual = RealMatrix(h.rows(), h.cols());
  long double loss = 0.0L;
  for (std::size_t k = 0; k < h.size(); ++k) {
    const long double r = static_cast<long double>(gain) * h[k] - target.values[k];
    ev.residual[k] = static_cast<double>(r);
    loss += r * r;
  }
  ev.loss = static_cast<double>(loss);
  if (with_gradient) {
    RealMatrix w(h.rows(), h.cols());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = 2.0 * gain * ev.residual[k];
    ev.gradient = psf_phase_vjp(fw, problem.grid(), w);
  }
  return ev;
}

inline DkoLossReport dko_loss(const DkoProblem& problem, const PhaseProfile& phase,
                              const EmbeddedTarget& target, bool fit_gain) {
  problem.check_target(target);
  const auto fw = problem.forward(phase);
  const RealMatrix* hp = &fw.psf.values;
  const RealMatrix* tp = &target.values;
  const double gain = fit_gain ? fit_shared_gain({&hp, 1}, {&tp, 1}) : 1.0;
  auto ev = evaluate_at_gain(problem, fw, target, gain, false);
  return {ev.loss, gain, std::move(ev.residual)};
}

/// ‖α·PSF(φ) − target‖², α fitted in closed form when `fit_gain`, else 1.
inline DkoLossReport dko_loss(const PhaseProfile& phase, const ApertureMask& aperture,
                              const EmbeddedTarget& target, const OpticalConfig& config,
                              bool fit_gain, const PropagationOptions& opts = {}) {
  return dko_loss(DkoProblem(aperture, config, opts), phase, target, fit_gain);
}

inline PhaseGradient dko_grad(const DkoProblem& problem, const PhaseProfile& phase,
                              const EmbeddedTarget& target, bool fit_gain) {
  problem.check_target(target);
  const auto fw = problem.forward(phase);
  const RealMatrix* hp = &fw.psf.values;
  const RealMatrix* tp = &target.values;
  const double gain = fit_gain ? fit_shared_gain({&hp, 1}, {&tp, 1}) : 1.0;
  auto ev = evaluate_at_gain(problem, fw, target, gain, true);
  return {phase.grid, std::move(ev.gradient)};
}

inline PhaseGradient dko_grad(const PhaseProfile& phase, const ApertureMask& aperture,
                              const EmbeddedTarget& target, const OpticalConfig& config,
                              bool fit_gain, const PropagationOptions& opts = {}) {
  return dko_grad(DkoProblem(aperture, config, opts), phase, target, fit_gain);
}

/// Worst relative disagreement between analytic and central-difference
/// derivatives at the given flat sample indices. Components below 1e-8 of the
/// largest analytic component are compared against that floor instead of
/// their own magnitude.
template <typename LossFn>
double fd_compare(LossFn&& loss_fn, const PhaseProfile& phase, const RealMatrix& analytic,
                  std::span<const std::size_t> probes, double step) {
  if (!(step > 0.0)) throw ValidationError("finite-difference step must be positive");
  double gmax = 0.0;
  for (double g : analytic) gmax = std::max(gmax, std::abs(g));
  const double floor = 1e-8 * gmax;
  double worst = 0.0;
  PhaseProfile probe = phase;
  for (std::size_t idx : probes) {
    const double orig = probe.values[idx];
    probe.values[idx] = orig + step;
    const double up = loss_fn(probe);
    probe.values[idx] = orig - step;
    const double down = loss_fn(probe);
    probe.values[idx] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(fd), floor});
    if (denom > 0.0) worst = std::max(worst, std::abs(a - fd) / denom);
  }
  return worst;
}

/// Random distinct sample indices where the aperture is open.
inline std::vector<std::size_t> interior_probes(const ApertureMask& aperture, std::size_t n_probes,
                                                std::uint64_t seed) {
  std::vector<std::size_t> open;
  for (std::size_t k = 0; k < aperture.transmittance.size(); ++k)
    if (aperture.transmittance[k] > 0.0) open.push_back(k);
  if (open.empty()) return {};
  std::mt19937_64 rng(seed);
  std::shuffle(open.begin(), open.end(), rng);
  open.resize(std::min(n_probes, open.size()));
  return open;
}

/// Central-difference check of dko_grad against dko_loss (gain refitted per
/// evaluation, which agrees with the frozen-gain gradient at the optimum gain).
inline double fd_check(const PhaseProfile& phase, const ApertureMask& aperture,
                       const EmbeddedTarget& target, const OpticalConfig& config,
                       std::size_t n_probes, double step, bool fit_gain = true,
                       std::uint64_t seed = 0, const PropagationOptions& opts = {}) {
  if (n_probes < 1) throw ValidationError("fd_check needs at least one probe");
  const DkoProblem problem(aperture, config, opts);
  const auto grad = dko_grad(problem, phase, target, fit_gain);
  const auto probes = interior_probes(aperture, n_probes, seed);
  return fd_compare([&](const PhaseProfile& p) { return dko_loss(problem, p, target, fit_gain).loss; },
                    phase, grad.values, probes, step);
}

}  // namespace metaforge
