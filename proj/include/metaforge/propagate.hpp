#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>

#include "metaforge/fft.hpp"
#include "metaforge/fieldcore.hpp"

namespace metaforge {

/// Sensor-plane sampling implied by a source grid under single-FFT Fresnel propagation.
struct SensorGrid {
  std::size_t n_u = 0;
  std::size_t n_v = 0;
  double pitch_m = 0.0;

  friend bool operator==(const SensorGrid&, const SensorGrid&) = default;
};

/// Sensor-plane intensity kernel, stored in physical (unnormalized) power units.
struct Psf {
  SensorGrid sensor;
  RealMatrix values;  // rows along v, cols along u
};

struct PropagationOptions {
  // Integer zero-padding of the source field; 1 means no padding.
  std::size_t padding_factor = 1;
};

/// Sensor sample pitch λ·s / (N·Δx), with N the padded transform size.
inline double sensor_pitch(const OpticalConfig& config, const GridSpec& grid,
                           const PropagationOptions& opts = {}) {
  const double n = static_cast<double>(grid.max_n() * opts.padding_factor);
  return config.wavelength_m * config.sensor_distance_m / (n * grid.pitch_m);
}

inline SensorGrid sensor_grid(const GridSpec& grid, const OpticalConfig& config,
                              const PropagationOptions& opts = {}) {
  if (opts.padding_factor < 1) throw ValidationError("padding_factor must be >= 1");
  const std::size_t n = grid.max_n() * opts.padding_factor;
  return {n, n, sensor_pitch(config, grid, opts)};
}

/// Quadratic Fresnel phase factor exp(jπ(x²+y²)/(λs)) on the source grid.
inline ComplexMatrix fresnel_chirp(const GridSpec& grid, const OpticalConfig& config) {
  ComplexMatrix q(grid.n_y, grid.n_x);
  const double k = std::numbers::pi / (config.wavelength_m * config.sensor_distance_m);
  for (std::size_t j = 0; j < grid.n_y; ++j) {
    const double y = grid.y(j);
    for (std::size_t i = 0; i < grid.n_x; ++i) {
      const double x = grid.x(i);
      q(j, i) = std::polar(1.0, k * (x * x + y * y));
    }
  }
  return q;
}

/// Intermediate quantities of one propagation, retained for the adjoint pass.
struct FresnelForward {
  ComplexMatrix source;    // C·chirp, zero-padded to the square transform size
  ComplexMatrix spectrum;  // unitary DFT of source, unshifted
  Psf psf;                 // |spectrum|², shifted so the axis sits at (n/2, n/2)
};

/// Propagation with a precomputed chirp; the hot path for optimization loops.
inline FresnelForward fresnel_forward(const ModulationProfile& modulation, const ComplexMatrix& chirp,
                                      const SensorGrid& sensor) {
  const GridSpec& g = modulation.grid;
  if (!all_finite(modulation.values)) throw ValidationError("modulation has non-finite entries");
  require_same_shape(modulation.values, chirp, "fresnel_forward chirp");
  FresnelForward fw;
  fw.source = ComplexMatrix(sensor.n_v, sensor.n_u);
  for (std::size_t j = 0; j < g.n_y; ++j)
    for (std::size_t i = 0; i < g.n_x; ++i)
      fw.source(j, i) = modulation.values(j, i) * chirp(j, i);
  fw.spectrum = fw.source;
  fft::transform(fw.spectrum, fft::Direction::forward);
  RealMatrix power(sensor.n_v, sensor.n_u);
  for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(fw.spectrum[k]);
  fw.psf = Psf{sensor, fft::fftshift(power)};
  return fw;
}

inline FresnelForward fresnel_forward(const ModulationProfile& modulation, const OpticalConfig& config,
                                      const PropagationOptions& opts = {}) {
  config.validate();
  return fresnel_forward(modulation, fresnel_chirp(modulation.grid, config),
                         sensor_grid(modulation.grid, config, opts));
}

/// PSF |DFT{C·exp(jπ(x²+y²)/(λs))}|² with unitary normalization, centered.
inline Psf fresnel_psf(const ModulationProfile& modulation, const OpticalConfig& config,
                       const PropagationOptions& opts = {}) {
  return fresnel_forward(modulation, config, opts).psf;
}

/// Pulls a sensor-plane cotangent dL/dPSF back to dL/dφ on the source grid.
///
/// With F = U·g, g = C·chirp and PSF = |F|², the chain rule gives
/// dL/dφ_p = 2·Im(conj(g_p)·(Uᴴ(w ⊙ F))_p) for w = dL/dPSF (unshifted).
inline RealMatrix psf_phase_vjp(const FresnelForward& fw, const GridSpec& grid,
                                const RealMatrix& dloss_dpsf) {
  require_same_shape(fw.psf.values, dloss_dpsf, "psf_phase_vjp");
  const RealMatrix w = fft::ifftshift(dloss_dpsf);
  ComplexMatrix back(fw.spectrum.rows(), fw.spectrum.cols());
  for (std::size_t k = 0; k < back.size(); ++k) back[k] = w[k] * fw.spectrum[k];
  fft::transform(back, fft::Direction::inverse);
  RealMatrix grad(grid.n_y, grid.n_x);
  for (std::size_t j = 0; j < grid.n_y; ++j)
    for (std::size_t i = 0; i < grid.n_x; ++i)
      grad(j, i) = 2.0 * (std::conj(fw.source(j, i)) * back(j, i)).imag();
  return grad;
}

struct CroppedPsf {
  Psf psf;
  double discarded_fraction = 0.0;
};

/// Central window of a PSF, with the fraction of power left outside it.
inline CroppedPsf crop_psf(const Psf& psf, std::size_t window_rows, std::size_t window_cols) {
  if (window_rows > psf.values.rows() || window_cols > psf.values.cols())
    throw BoundsError("crop window " + std::to_string(window_rows) + "x" +
                      std::to_string(window_cols) + " larger than PSF " +
                      std::to_string(psf.values.rows()) + "x" + std::to_string(psf.values.cols()));
  CroppedPsf out;
  out.psf.values = center_window(psf.values, window_rows, window_cols);
  out.psf.sensor = {window_cols, window_rows, psf.sensor.pitch_m};
  const double total = sum(psf.values);
  out.discarded_fraction = total > 0.0 ? std::max(0.0, 1.0 - sum(out.psf.values) / total) : 0.0;
  return out;
}

}  // namespace metaforge
