#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/errors.hpp"
#include "metaforge/matrix.hpp"
#include "metaforge/propagate.hpp"
#include "metaforge/tensor.hpp"

namespace metaforge {

enum class Color { mono, R, G, B };
enum class Sign { plus, minus };
enum class ColorMode { mono_signed, rgb_signed };

inline const char* to_string(Color c) {
  switch (c) {
    case Color::mono: return "mono";
    case Color::R: return "R";
    case Color::G: return "G";
    case Color::B: return "B";
  }
  return "?";
}
inline const char* to_string(Sign s) { return s == Sign::plus ? "+" : "-"; }
inline const char* to_string(ColorMode m) {
  return m == ColorMode::mono_signed ? "mono-signed" : "rgb-signed";
}

inline ColorMode parse_color_mode(const std::string& s) {
  if (s == "mono-signed") return ColorMode::mono_signed;
  if (s == "rgb-signed") return ColorMode::rgb_signed;
  throw ValidationError("unknown plan '" + s + "' (expected mono-signed or rgb-signed)");
}

inline Color parse_color(const std::string& s) {
  if (s == "mono") return Color::mono;
  if (s == "R") return Color::R;
  if (s == "G") return Color::G;
  if (s == "B") return Color::B;
  throw ValidationError("unknown color '" + s + "'");
}

inline std::size_t colors_per_channel(ColorMode m) { return m == ColorMode::mono_signed ? 1 : 3; }

/// A target kernel in true-convolution orientation.
struct SignedKernel {
  RealMatrix taps;  // k×k, k odd
  Color channel = Color::mono;
  double tap_pitch_m = 0.0;

  std::size_t size() const noexcept { return taps.rows(); }
};

struct KernelHalfPair {
  RealMatrix plus;
  RealMatrix minus;
};

struct PlanElement {
  std::size_t index = 0;    // position in the array
  std::size_t channel = 0;  // output channel
  Color color = Color::mono;
  Sign sign = Sign::plus;

  friend bool operator==(const PlanElement&, const PlanElement&) = default;
};

struct ArrayPlan {
  std::size_t output_channels = 0;
  ColorMode color_mode = ColorMode::mono_signed;
  std::vector<PlanElement> elements;

  friend bool operator==(const ArrayPlan&, const ArrayPlan&) = default;
};

/// A non-negative half-kernel resampled onto the full sensor grid.
struct EmbeddedTarget {
  SensorGrid sensor;
  RealMatrix values;
  struct Window {
    std::size_t row0 = 0, col0 = 0, rows = 0, cols = 0;
  } footprint;
  std::size_t samples_per_tap = 1;
};

/// h± = (±h + |±h|)/2.
inline KernelHalfPair split_signed(const SignedKernel& kernel) {
  if (!all_finite(kernel.taps)) throw ValidationError("kernel taps must be finite");
  KernelHalfPair out{RealMatrix(kernel.taps.rows(), kernel.taps.cols(), 0.0),
                     RealMatrix(kernel.taps.rows(), kernel.taps.cols(), 0.0)};
  for (std::size_t i = 0; i < kernel.taps.size(); ++i) {
    const double h = kernel.taps[i];
    if (h > 0.0) out.plus[i] = h;
    else if (h < 0.0) out.minus[i] = -h;
  }
  return out;
}

/// Element order: output channel, then color (R, G, B), then sign (+, -).
inline ArrayPlan plan_array(std::size_t output_channels, ColorMode mode) {
  if (output_channels < 1) throw ValidationError("plan needs at least one output channel");
  ArrayPlan plan{output_channels, mode, {}};
  const std::vector<Color> colors = mode == ColorMode::mono_signed
                                        ? std::vector<Color>{Color::mono}
                                        : std::vector<Color>{Color::R, Color::G, Color::B};
  for (std::size_t l = 0; l < output_channels; ++l)
    for (Color c : colors)
      for (Sign s : {Sign::plus, Sign::minus})
        plan.elements.push_back({plan.elements.size(), l, c, s});
  return plan;
}

/// Index into ArrayPlan::elements of kernel (channel, color slot) with the given sign.
inline std::size_t plan_element_index(std::size_t channel, std::size_t color_slot,
                                      std::size_t colors, Sign sign) {
  return (channel * colors + color_slot) * 2 + (sign == Sign::plus ? 0 : 1);
}

inline nlohmann::json plan_to_json(const ArrayPlan& plan) {
  nlohmann::json j;
  j["output_channels"] = plan.output_channels;
  j["color_mode"] = to_string(plan.color_mode);
  auto& arr = j["elements"] = nlohmann::json::array();
  for (const auto& e : plan.elements)
    arr.push_back({{"index", e.index}, {"channel", e.channel}, {"color", to_string(e.color)},
                   {"sign", to_string(e.sign)}});
  return j;
}

inline ArrayPlan plan_from_json(const nlohmann::json& j) {
  try {
    ArrayPlan plan;
    plan.output_channels = j.at("output_channels").get<std::size_t>();
    plan.color_mode = parse_color_mode(j.at("color_mode").get<std::string>());
    for (const auto& e : j.at("elements")) {
      const auto sign = e.at("sign").get<std::string>();
      if (sign != "+" && sign != "-") throw ValidationError("bad sign '" + sign + "' in plan");
      plan.elements.push_back({e.at("index").get<std::size_t>(), e.at("channel").get<std::size_t>(),
                               parse_color(e.at("color").get<std::string>()),
                               sign == "+" ? Sign::plus : Sign::minus});
    }
    return plan;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed plan JSON: ") + ex.what());
  }
}

/// Mass-preserving block expansion of a half-kernel, centered on the sensor grid.
inline EmbeddedTarget embed_target(const RealMatrix& half, const SensorGrid& sensor,
                                   std::size_t samples_per_tap = 1) {
  if (samples_per_tap < 1) throw ValidationError("samples_per_tap must be >= 1");
  const std::size_t fr = half.rows() * samples_per_tap;
  const std::size_t fc = half.cols() * samples_per_tap;
  if (fr > sensor.n_v || fc > sensor.n_u)
    throw BoundsError("kernel footprint " + std::to_string(fr) + "x" + std::to_string(fc) +
                      " exceeds sensor grid " + std::to_string(sensor.n_v) + "x" +
                      std::to_string(sensor.n_u));
  for (double v : half)
    if (!(v >= 0.0)) throw ValidationError("embedded half-kernels must be non-negative");
  EmbeddedTarget t;
  t.sensor = sensor;
  t.values = RealMatrix(sensor.n_v, sensor.n_u, 0.0);
  t.footprint = {sensor.n_v / 2 - fr / 2, sensor.n_u / 2 - fc / 2, fr, fc};
  t.samples_per_tap = samples_per_tap;
  const double scale = 1.0 / static_cast<double>(samples_per_tap * samples_per_tap);
  for (std::size_t r = 0; r < fr; ++r)
    for (std::size_t c = 0; c < fc; ++c)
      t.values(t.footprint.row0 + r, t.footprint.col0 + c) =
          half(r / samples_per_tap, c / samples_per_tap) * scale;
  return t;
}

/// Reads an L×C×k×k weight tensor in CNN cross-correlation convention and
/// returns L·C kernels flipped into true-convolution orientation, ordered
/// (channel, color) to match ArrayPlan.
inline std::vector<SignedKernel> import_first_layer(const Tensor& weights, double tap_pitch_m) {
  if (weights.shape.size() != 4)
    throw ValidationError("first-layer tensor must be 4-D [L, C, k, k], got " + weights.shape_string());
  const std::size_t L = weights.shape[0], C = weights.shape[1];
  const std::size_t kr = weights.shape[2], kc = weights.shape[3];
  if (C != 1 && C != 3) throw ValidationError("unsupported input channel count " + std::to_string(C) + " (need 1 or 3)");
  if (kr != kc) throw ValidationError("kernels must be square");
  if (kr % 2 == 0) throw ValidationError("even kernel size " + std::to_string(kr) + " unsupported; pad to odd size externally");
  if (L < 1) throw ValidationError("first-layer tensor has no output channels");
  std::vector<SignedKernel> out;
  out.reserve(L * C);
  const std::size_t k2 = kr * kc;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t c = 0; c < C; ++c) {
      const auto first = weights.data.begin() + static_cast<std::ptrdiff_t>((l * C + c) * k2);
      RealMatrix taps(kr, kc, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(k2)));
      if (!all_finite(taps)) throw ValidationError("non-finite kernel weight");
      const Color color = C == 1 ? Color::mono : (c == 0 ? Color::R : c == 1 ? Color::G : Color::B);
      out.push_back({rotate180(taps), color, tap_pitch_m});
    }
  }
  return out;
}

/// Inverse of import_first_layer.
inline Tensor export_first_layer(const std::vector<SignedKernel>& kernels, std::size_t channels_in) {
  if (kernels.empty() || channels_in == 0 || kernels.size() % channels_in != 0)
    throw ValidationError("kernel count not divisible by input channels");
  const std::size_t k = kernels.front().taps.rows();
  Tensor t({kernels.size() / channels_in, channels_in, k, k},
           std::vector<double>(kernels.size() * k * k));
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (kernels[i].taps.rows() != k || kernels[i].taps.cols() != k)
      throw ShapeError("kernels differ in size");
    const RealMatrix w = rotate180(kernels[i].taps);
    std::copy(w.begin(), w.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * k * k));
  }
  return t;
}

}  // namespace metaforge
