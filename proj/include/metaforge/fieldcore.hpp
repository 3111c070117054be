#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>

#include "metaforge/errors.hpp"
#include "metaforge/matrix.hpp"

namespace metaforge {

/// Sampling of the metasurface plane. Sample (n/2, n/2) is the optical axis.
struct GridSpec {
  std::size_t n_x = 0;
  std::size_t n_y = 0;
  double pitch_m = 0.0;

  GridSpec() = default;
  GridSpec(std::size_t nx, std::size_t ny, double pitch) : n_x(nx), n_y(ny), pitch_m(pitch) {
    if (n_x < 2 || n_y < 2) throw ValidationError("grid needs at least 2 samples per axis");
    if (!(pitch_m > 0.0) || !std::isfinite(pitch_m))
      throw ValidationError("grid pitch must be positive and finite");
  }
  static GridSpec square(std::size_t n, double pitch) { return GridSpec(n, n, pitch); }

  double extent_x() const noexcept { return static_cast<double>(n_x) * pitch_m; }
  double extent_y() const noexcept { return static_cast<double>(n_y) * pitch_m; }
  double min_extent() const noexcept { return std::min(extent_x(), extent_y()); }
  std::size_t max_n() const noexcept { return std::max(n_x, n_y); }

  // Physical coordinate of column i / row j relative to the optical axis.
  double x(std::size_t i) const noexcept {
    return (static_cast<double>(i) - static_cast<double>(n_x / 2)) * pitch_m;
  }
  double y(std::size_t j) const noexcept {
    return (static_cast<double>(j) - static_cast<double>(n_y / 2)) * pitch_m;
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": grid mismatch");
}

struct OpticalConfig {
  double wavelength_m = 532e-9;
  double sensor_distance_m = 10e-3;

  void validate() const {
    if (!(wavelength_m > 0.0) || !std::isfinite(wavelength_m))
      throw ValidationError("wavelength_m must be positive");
    if (!(sensor_distance_m > 0.0) || !std::isfinite(sensor_distance_m))
      throw ValidationError("sensor_distance_m must be positive");
  }
};

/// Warns (never rejects) when the aperture is not small against the sensor distance.
inline std::optional<std::string> paraxial_warning(const GridSpec& grid, const OpticalConfig& cfg) {
  const double extent = std::max(grid.extent_x(), grid.extent_y());
  if (extent > 0.1 * cfg.sensor_distance_m) {
    return "aperture extent " + std::to_string(extent) + " m is not small against sensor distance " +
           std::to_string(cfg.sensor_distance_m) + " m; paraxial model may be inaccurate";
  }
  return std::nullopt;
}

/// Phase in radians, stored unwrapped.
struct PhaseProfile {
  GridSpec grid;
  RealMatrix values;

  PhaseProfile() = default;
  PhaseProfile(GridSpec g, RealMatrix v) : grid(g), values(std::move(v)) {
    if (values.rows() != grid.n_y || values.cols() != grid.n_x)
      throw ShapeError("phase values do not match grid");
    if (!all_finite(values)) throw ValidationError("phase values must be finite");
  }
  static PhaseProfile zeros(const GridSpec& g) { return {g, RealMatrix(g.n_y, g.n_x, 0.0)}; }
};

struct ApertureMask {
  GridSpec grid;
  RealMatrix transmittance;

  ApertureMask() = default;
  ApertureMask(GridSpec g, RealMatrix t) : grid(g), transmittance(std::move(t)) {
    if (transmittance.rows() != grid.n_y || transmittance.cols() != grid.n_x)
      throw ShapeError("transmittance does not match grid");
    for (double v : transmittance)
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("transmittance must lie in [0, 1]");
  }
  static ApertureMask open(const GridSpec& g) { return {g, RealMatrix(g.n_y, g.n_x, 1.0)}; }
};

/// Complex modulation C = T·exp(jφ).
struct ModulationProfile {
  GridSpec grid;
  ComplexMatrix values;
};

inline ApertureMask make_circular_aperture(const GridSpec& grid, double diameter_m) {
  if (!(diameter_m >= 0.0)) throw ValidationError("aperture diameter must be non-negative");
  // Relative slack so that "full extent" survives the n*pitch round trip.
  if (diameter_m > grid.min_extent() * (1.0 + 1e-12)) {
    throw BoundsError("aperture diameter " + std::to_string(diameter_m) +
                      " m exceeds grid extent " + std::to_string(grid.min_extent()) + " m");
  }
  const double radius = 0.5 * diameter_m;
  RealMatrix t(grid.n_y, grid.n_x, 0.0);
  for (std::size_t j = 0; j < grid.n_y; ++j) {
    for (std::size_t i = 0; i < grid.n_x; ++i) {
      // Compare in sample units to keep the mask exactly symmetric.
      const double dx = static_cast<double>(i) - static_cast<double>(grid.n_x / 2);
      const double dy = static_cast<double>(j) - static_cast<double>(grid.n_y / 2);
      const double r_samples = std::sqrt(dx * dx + dy * dy);
      if (r_samples * grid.pitch_m < radius) t(j, i) = 1.0;
    }
  }
  return {grid, std::move(t)};
}

inline ApertureMask make_default_aperture(const GridSpec& grid) {
  return make_circular_aperture(grid, grid.min_extent());
}

inline ModulationProfile make_modulation(const PhaseProfile& phase, const ApertureMask& aperture) {
  require_same_grid(phase.grid, aperture.grid, "make_modulation");
  ComplexMatrix c(phase.grid.n_y, phase.grid.n_x);
  for (std::size_t k = 0; k < c.size(); ++k) {
    const double t = aperture.transmittance[k];
    c[k] = t == 0.0 ? complex{0.0, 0.0} : std::polar(t, phase.values[k]);
  }
  return {phase.grid, std::move(c)};
}

inline PhaseProfile make_lens_phase(const GridSpec& grid, const OpticalConfig& cfg, double focal_m) {
  if (!(focal_m > 0.0)) throw ValidationError("focal length must be positive");
  cfg.validate();
  RealMatrix v(grid.n_y, grid.n_x);
  const double k = -std::numbers::pi / (cfg.wavelength_m * focal_m);
  for (std::size_t j = 0; j < grid.n_y; ++j) {
    const double y = grid.y(j);
    for (std::size_t i = 0; i < grid.n_x; ++i) {
      const double x = grid.x(i);
      v(j, i) = k * (x * x + y * y);
    }
  }
  return {grid, std::move(v)};
}

}  // namespace metaforge
