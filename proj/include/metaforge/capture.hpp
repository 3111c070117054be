#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metaforge/fft.hpp"
#include "metaforge/kernels.hpp"
#include "metaforge/propagate.hpp"

namespace metaforge {

/// Pinhole image of the scene: one or three linear-intensity channels.
struct SceneImage {
  std::vector<RealMatrix> channels;

  std::size_t height() const { return channels.empty() ? 0 : channels.front().rows(); }
  std::size_t width() const { return channels.empty() ? 0 : channels.front().cols(); }

  void validate() const {
    if (channels.size() != 1 && channels.size() != 3) throw ValidationError("scene must have 1 or 3 channels");
    for (const auto& c : channels) {
      require_same_shape(c, channels.front(), "scene channels");
      for (double v : c)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("scene intensities must be finite and non-negative");
    }
  }
};

struct FeatureMap {
  std::vector<RealMatrix> channels;
};

enum class NoiseKind { none, gaussian, poisson };
enum class Padding { valid, zero };

struct CaptureConfig {
  std::size_t samples_per_tap = 1;
  std::size_t stride = 1;
  NoiseKind noise = NoiseKind::none;
  double noise_sigma = 0.0;    // gaussian: std-dev in feature units
  double poisson_scale = 1.0;  // poisson: photons per unit of measured intensity
  std::optional<int> quantization_bits;
  // DKO gains α, one per (channel, color) pair: α·PSF ≈ kernel.
  std::vector<double> gains;
  std::uint64_t seed = 0;

  void validate() const {
    if (samples_per_tap < 1) throw ValidationError("samples_per_tap must be >= 1");
    if (stride < 1) throw ValidationError("stride must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ValidationError("noise sigma must be >= 0");
    if (!(poisson_scale > 0.0)) throw ValidationError("poisson scale must be > 0");
    if (quantization_bits && (*quantization_bits < 1 || *quantization_bits > 32))
      throw ValidationError("quantization_bits must be in [1, 32]");
  }
};

/// "valid" true convolution through an H×W FFT. Circular wrap-around only
/// touches rows/cols below k-1, which the valid region excludes.
inline RealMatrix convolve_valid(const RealMatrix& scene, const RealMatrix& kernel) {
  if (kernel.rows() > scene.rows() || kernel.cols() > scene.cols() || kernel.empty())
    throw BoundsError("kernel " + std::to_string(kernel.rows()) + "x" + std::to_string(kernel.cols()) +
                      " does not fit scene " + std::to_string(scene.rows()) + "x" + std::to_string(scene.cols()));
  const std::size_t H = scene.rows(), W = scene.cols();
  ComplexMatrix a(H, W), b(H, W);
  for (std::size_t k = 0; k < scene.size(); ++k) a[k] = scene[k];
  for (std::size_t r = 0; r < kernel.rows(); ++r)
    for (std::size_t c = 0; c < kernel.cols(); ++c) b(r, c) = kernel(r, c);
  fft::transform(a, fft::Direction::forward);
  fft::transform(b, fft::Direction::forward);
  // Unitary transforms: conv = sqrt(HW)·IDFT(A·B).
  const double s = std::sqrt(static_cast<double>(H * W));
  for (std::size_t k = 0; k < a.size(); ++k) a[k] *= b[k] * s;
  fft::transform(a, fft::Direction::inverse);
  const std::size_t oh = H - kernel.rows() + 1, ow = W - kernel.cols() + 1;
  RealMatrix out(oh, ow);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) out(r, c) = a(r + kernel.rows() - 1, c + kernel.cols() - 1).real();
  return out;
}

/// Sensor measurement I * h over the valid region.
inline RealMatrix render_measurement(const RealMatrix& scene, const Psf& psf) {
  RealMatrix out = convolve_valid(scene, psf.values);
  // Non-negative scene and kernel; clip transform round-off.
  for (auto& v : out) v = std::max(v, 0.0);
  return out;
}

namespace detail {

inline void quantize(RealMatrix& m, int bits, double full_scale) {
  if (!(full_scale > 0.0)) return;
  const double levels = std::ldexp(1.0, bits) - 1.0;
  for (auto& v : m) v = std::round(std::clamp(v / full_scale, 0.0, 1.0) * levels) * full_scale / levels;
}

}  // namespace detail

/// (meas+ − meas−)/gain with optional sensor effects. Shot noise and
/// quantization act on each raw measurement; gaussian read noise on the result.
inline RealMatrix compose_feature(const RealMatrix& meas_plus, const RealMatrix& meas_minus, double gain,
                                  const CaptureConfig& cfg, std::uint64_t stream = 0) {
  require_same_shape(meas_plus, meas_minus, "compose_feature");
  if (gain == 0.0 || !std::isfinite(gain)) throw ValidationError("capture gain must be finite and non-zero");
  RealMatrix p = meas_plus, m = meas_minus;
  std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  if (cfg.noise == NoiseKind::poisson) {
    for (auto* x : {&p, &m})
      for (auto& v : *x) {
        std::poisson_distribution<long long> d(std::max(v, 0.0) * cfg.poisson_scale);
        v = static_cast<double>(d(rng)) / cfg.poisson_scale;
      }
  }
  if (cfg.quantization_bits) {
    double fs = 0.0;
    for (double v : p) fs = std::max(fs, v);
    for (double v : m) fs = std::max(fs, v);
    detail::quantize(p, *cfg.quantization_bits, fs);
    detail::quantize(m, *cfg.quantization_bits, fs);
  }
  RealMatrix out(p.rows(), p.cols());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (p[k] - m[k]) / gain;
  if (cfg.noise == NoiseKind::gaussian && cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> d(0.0, cfg.noise_sigma);
    for (auto& v : out) v += d(rng);
  }
  return out;
}

inline std::size_t conv_output_size(std::size_t n, std::size_t k, std::size_t stride, Padding pad) {
  const std::size_t p = pad == Padding::zero ? (k - 1) / 2 : 0;
  if (n + 2 * p < k) throw BoundsError("kernel larger than (padded) input");
  return (n + 2 * p - k) / stride + 1;
}

/// The electronic first layer on true-convolution kernels (as produced by
/// import_first_layer). `kernels` holds L·C entries ordered (channel, color);
/// color contributions are summed per output channel.
inline FeatureMap electronic_conv(const SceneImage& scene, const std::vector<SignedKernel>& kernels,
                                  std::size_t stride = 1, Padding padding = Padding::valid) {
  scene.validate();
  if (stride < 1) throw ValidationError("stride must be >= 1");
  const std::size_t C = scene.channels.size();
  if (kernels.empty() || kernels.size() % C != 0)
    throw ShapeError("kernel count " + std::to_string(kernels.size()) + " does not match " +
                     std::to_string(C) + " scene channels");
  const std::size_t L = kernels.size() / C;
  const std::size_t k = kernels.front().taps.rows();
  const std::size_t H = scene.height(), W = scene.width();
  const std::size_t oh = conv_output_size(H, k, stride, padding);
  const std::size_t ow = conv_output_size(W, k, stride, padding);
  const auto pad = static_cast<std::ptrdiff_t>(padding == Padding::zero ? (k - 1) / 2 : 0);
  FeatureMap out;
  out.channels.assign(L, RealMatrix(oh, ow, 0.0));
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t c = 0; c < C; ++c) {
      const RealMatrix& ker = kernels[l * C + c].taps;
      if (ker.rows() != k || ker.cols() != k) throw ShapeError("kernels differ in size");
      const RealMatrix& img = scene.channels[c];
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t q = 0; q < ow; ++q) {
          double acc = 0.0;
          for (std::size_t a = 0; a < k; ++a) {
            const auto y = static_cast<std::ptrdiff_t>(r * stride + k - 1 - a) - pad;
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < k; ++b) {
              const auto x = static_cast<std::ptrdiff_t>(q * stride + k - 1 - b) - pad;
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += ker(a, b) * img(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            }
          }
          out.channels[l](r, q) += acc;
        }
      }
    }
  }
  return out;
}

/// Block mean over samples_per_tap², then keep every stride-th sample.
/// Trailing rows/cols that do not fill a block are dropped and reported in `warning`.
inline RealMatrix bin_and_stride(const RealMatrix& m, std::size_t samples_per_tap, std::size_t stride,
                                 std::string* warning = nullptr) {
  if (samples_per_tap < 1 || stride < 1) throw ValidationError("samples_per_tap and stride must be >= 1");
  const std::size_t br = m.rows() / samples_per_tap, bc = m.cols() / samples_per_tap;
  if (warning && (m.rows() % samples_per_tap || m.cols() % samples_per_tap))
    *warning = "measurement " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
               " truncated to multiples of " + std::to_string(samples_per_tap);
  const double inv = 1.0 / static_cast<double>(samples_per_tap * samples_per_tap);
  const std::size_t oh = br == 0 ? 0 : (br - 1) / stride + 1;
  const std::size_t ow = bc == 0 ? 0 : (bc - 1) / stride + 1;
  RealMatrix out(oh, ow);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::size_t a = 0; a < samples_per_tap; ++a)
        for (std::size_t b = 0; b < samples_per_tap; ++b)
          acc += m((r * stride) * samples_per_tap + a, (c * stride) * samples_per_tap + b);
      out(r, c) = acc * inv;
    }
  return out;
}

/// Nearest-neighbour upsampling of a scene channel onto the sensor sampling.
inline RealMatrix upsample(const RealMatrix& m, std::size_t factor) {
  if (factor == 1) return m;
  RealMatrix out(m.rows() * factor, m.cols() * factor);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = m(r / factor, c / factor);
  return out;
}

/// Realized PSF pair for one (channel, color) kernel.
struct RealizedPair {
  Psf plus;
  Psf minus;
  double gain = 1.0;  // DKO gain α
};

/// Full optical first layer: render every ± pair, subtract, compensate the
/// gain, sum colors per output channel, then bin and stride.
/// `pairs` is ordered (channel, color) like the ArrayPlan; each PSF is
/// cropped to `kernel_taps·samples_per_tap` around its center.
inline FeatureMap simulate_capture(const SceneImage& scene, const std::vector<RealizedPair>& pairs,
                                   std::size_t kernel_taps, const CaptureConfig& cfg,
                                   std::vector<std::string>* warnings = nullptr) {
  scene.validate();
  cfg.validate();
  const std::size_t C = scene.channels.size();
  if (pairs.empty() || pairs.size() % C != 0)
    throw ShapeError("realized pair count does not match scene channels");
  const std::size_t L = pairs.size() / C;
  const std::size_t fp = kernel_taps * cfg.samples_per_tap;
  std::vector<RealMatrix> sensor_scene;
  for (const auto& ch : scene.channels) sensor_scene.push_back(upsample(ch, cfg.samples_per_tap));
  FeatureMap out;
  for (std::size_t l = 0; l < L; ++l) {
    RealMatrix acc;
    for (std::size_t c = 0; c < C; ++c) {
      const auto& pr = pairs[l * C + c];
      if (pr.gain == 0.0) throw ValidationError("pair " + std::to_string(l * C + c) + " has zero DKO gain");
      const auto hp = crop_psf(pr.plus, fp, fp).psf;
      const auto hm = crop_psf(pr.minus, fp, fp).psf;
      const RealMatrix f = compose_feature(render_measurement(sensor_scene[c], hp),
                                           render_measurement(sensor_scene[c], hm), 1.0 / pr.gain, cfg,
                                           l * C + c);
      if (acc.empty()) acc = f;
      else for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += f[k];
    }
    std::string warn;
    out.channels.push_back(bin_and_stride(acc, cfg.samples_per_tap, cfg.stride, &warn));
    if (warnings && !warn.empty()) warnings->push_back(warn);
  }
  return out;
}

/// ‖a − b‖ / ‖b‖ over all channels.
inline double relative_l2(const FeatureMap& a, const FeatureMap& b) {
  if (a.channels.size() != b.channels.size()) throw ShapeError("feature maps differ in channel count");
  double num = 0.0, den = 0.0;
  for (std::size_t l = 0; l < a.channels.size(); ++l) {
    require_same_shape(a.channels[l], b.channels[l], "relative_l2");
    for (std::size_t k = 0; k < a.channels[l].size(); ++k) {
      const double d = a.channels[l][k] - b.channels[l][k];
      num += d * d;
      den += b.channels[l][k] * b.channels[l][k];
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace metaforge
