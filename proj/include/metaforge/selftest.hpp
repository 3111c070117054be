#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "metaforge/adjoint.hpp"
#include "metaforge/capture.hpp"
#include "metaforge/kernels.hpp"
#include "metaforge/propagate.hpp"

// Invariant suite run by `metaforge selftest`. The reference computations
// here are deliberately naive and share no code with the fast paths.

namespace metaforge::selftest {

struct Check {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
};

namespace detail {

inline ModulationProfile random_modulation(const GridSpec& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ph(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.0, 1.0);
  ComplexMatrix v(g.n_y, g.n_x);
  for (auto& c : v) c = std::polar(amp(rng), ph(rng));
  return {g, std::move(v)};
}

inline RealMatrix naive_fresnel_psf(const ModulationProfile& m, const OpticalConfig& o) {
  const GridSpec& g = m.grid;
  const std::size_t N = g.max_n();
  RealMatrix out(N, N);
  const double k = std::numbers::pi / (o.wavelength_m * o.sensor_distance_m);
  for (std::size_t v = 0; v < N; ++v)
    for (std::size_t u = 0; u < N; ++u) {
      const double fv = static_cast<double>(v) - static_cast<double>(N / 2);
      const double fu = static_cast<double>(u) - static_cast<double>(N / 2);
      complex acc{0.0, 0.0};
      for (std::size_t j = 0; j < g.n_y; ++j)
        for (std::size_t i = 0; i < g.n_x; ++i) {
          const double x = g.x(i), y = g.y(j);
          const double arg = k * (x * x + y * y) -
                             2.0 * std::numbers::pi * (fu * static_cast<double>(i) + fv * static_cast<double>(j)) /
                                 static_cast<double>(N);
          acc += m.values(j, i) * std::polar(1.0, arg);
        }
      out(v, u) = std::norm(acc) / static_cast<double>(N * N);
    }
  return out;
}

}  // namespace detail

inline std::vector<Check> run_all(std::uint64_t seed = 1) {
  std::vector<Check> checks;
  std::mt19937_64 rng(seed);
  const OpticalConfig optics;

  {  // Parseval
    const auto g = GridSpec::square(64, 2.5e-6);
    const auto m = detail::random_modulation(g, rng);
    double in = 0.0;
    for (const auto& c : m.values) in += std::norm(c);
    const double out = sum(fresnel_psf(m, optics).values);
    checks.push_back({"parseval", false, std::abs(out - in) / in, 1e-10});
  }
  {  // FFT vs direct DFT
    const auto g = GridSpec::square(12, 2.5e-6);
    const auto m = detail::random_modulation(g, rng);
    const RealMatrix fast = fresnel_psf(m, optics).values;
    const RealMatrix slow = detail::naive_fresnel_psf(m, optics);
    double err = 0.0, peak = 0.0;
    for (std::size_t k = 0; k < fast.size(); ++k) {
      err = std::max(err, std::abs(fast[k] - slow[k]));
      peak = std::max(peak, std::abs(slow[k]));
    }
    checks.push_back({"fft_vs_dft", false, err / peak, 1e-10});
  }
  {  // adjoint gradient vs finite differences
    const auto g = GridSpec::square(16, 2.5e-6);
    const auto ap = make_default_aperture(g);
    std::uniform_real_distribution<double> u(0.0, 1.0), ph(-3.0, 3.0);
    RealMatrix phase(16, 16), half(5, 5);
    for (auto& v : phase) v = ph(rng);
    for (auto& v : half) v = u(rng);
    const auto target = embed_target(half, sensor_grid(g, optics));
    const double err = fd_check({g, phase}, ap, target, optics, 20, 1e-4, true, seed);
    checks.push_back({"fd_gradient", false, err, 1e-5});
  }
  {  // split / reconstruct
    std::normal_distribution<double> n;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      RealMatrix k(7, 7);
      for (auto& v : k) v = n(rng);
      const auto pair = split_signed({k, Color::mono, 1.0});
      for (std::size_t i = 0; i < k.size(); ++i) {
        worst = std::max(worst, std::abs(pair.plus[i] - pair.minus[i] - k[i]));
        if (pair.plus[i] < 0 || pair.minus[i] < 0 || pair.plus[i] * pair.minus[i] != 0) worst = 1.0;
      }
    }
    checks.push_back({"split_reconstruct", false, worst, 0.0});
  }
  {  // FFT convolution vs nested loops
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RealMatrix scene(16, 16), ker(3, 3);
    for (auto& v : scene) v = u(rng);
    for (auto& v : ker) v = u(rng);
    const RealMatrix fast = convolve_valid(scene, ker);
    double err = 0.0, peak = 0.0;
    for (std::size_t r = 0; r < fast.rows(); ++r)
      for (std::size_t c = 0; c < fast.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t a = 0; a < 3; ++a)
          for (std::size_t b = 0; b < 3; ++b) acc += ker(a, b) * scene(r + 2 - a, c + 2 - b);
        err = std::max(err, std::abs(acc - fast(r, c)));
        peak = std::max(peak, std::abs(acc));
      }
    checks.push_back({"conv_oracle", false, err / peak, 1e-10});
  }
  for (auto& c : checks) c.passed = std::isfinite(c.value) && c.value <= c.tolerance;
  return checks;
}

}  // namespace metaforge::selftest
