#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "metaforge/capture.hpp"
#include "metaforge/dko.hpp"
#include "metaforge/tensorio.hpp"

namespace metaforge {

/// JSON mirror of every module setting. Physical quantities are SI with unit-suffixed keys.
struct RunConfig {
  OpticalConfig optics;
  std::size_t grid_n = 128;
  double pitch_m = 2.5e-6;
  std::optional<double> aperture_diameter_m;  // unset: full grid extent
  std::size_t padding_factor = 1;
  std::size_t samples_per_tap = 1;
  std::uint64_t seed = 0;
  DkoConfig dko;
  CaptureConfig capture;

  GridSpec grid() const { return GridSpec::square(grid_n, pitch_m); }
  PropagationOptions propagation() const { return {padding_factor}; }
  ApertureMask aperture() const {
    return aperture_diameter_m ? make_circular_aperture(grid(), *aperture_diameter_m) : make_default_aperture(grid());
  }
  /// Physical footprint of one kernel tap on the sensor.
  double tap_pitch_m() const {
    return static_cast<double>(samples_per_tap) * sensor_pitch(optics, grid(), propagation());
  }
};

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path, std::set<std::string> known)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("type error at " + path_ + ": expected object");
    for (const auto& [key, _] : j_.items())
      if (!known.count(key)) throw ValidationError("unknown key at " + at(key));
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const nlohmann::json& raw(const std::string& key) const { return j_.at(key); }

  void real(const std::string& key, double& out) const {
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number()) throw ValidationError("type error at " + at(key) + ": expected number");
    out = j_.at(key).get<double>();
  }
  void positive(const std::string& key, double& out) const {
    real(key, out);
    if (j_.contains(key) && !(out > 0.0)) throw ValidationError("value error at " + at(key) + ": must be > 0");
  }
  template <typename Int>
  void integer(const std::string& key, Int& out) const {
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ValidationError("type error at " + at(key) + ": expected non-negative integer");
    out = j_.at(key).get<Int>();
  }
  void boolean(const std::string& key, bool& out) const {
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_boolean()) throw ValidationError("type error at " + at(key) + ": expected boolean");
    out = j_.at(key).get<bool>();
  }
  std::optional<std::string> string(const std::string& key) const {
    if (!j_.contains(key)) return std::nullopt;
    if (!j_.at(key).is_string()) throw ValidationError("type error at " + at(key) + ": expected string");
    return j_.at(key).get<std::string>();
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

inline OptimizerKind parse_optimizer(const std::string& s, const std::string& where) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "gradient-descent") return OptimizerKind::gradient_descent;
  throw ValidationError("value error at " + where + ": unknown optimizer '" + s + "'");
}

inline InitKind parse_init(const std::string& s, const std::string& where) {
  if (s == "lens+jitter") return InitKind::lens_jitter;
  if (s == "random") return InitKind::random;
  if (s == "zero") return InitKind::zero;
  throw ValidationError("value error at " + where + ": unknown init '" + s + "'");
}

inline NoiseKind parse_noise_kind(const std::string& s, const std::string& where) {
  if (s == "none") return NoiseKind::none;
  if (s == "gaussian") return NoiseKind::gaussian;
  if (s == "poisson") return NoiseKind::poisson;
  throw ValidationError("value error at " + where + ": unknown noise model '" + s + "'");
}

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::gaussian: return "gaussian";
    case NoiseKind::poisson: return "poisson";
  }
  return "?";
}

}  // namespace detail

/// Parses a config object; omitted keys keep their defaults, unknown keys are rejected.
inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig cfg;
  const detail::ConfigReader top(j, "$",
                                 {"format_version", "wavelength_m", "sensor_distance_m", "grid_n", "pitch_m",
                                  "aperture_diameter_m", "padding_factor", "samples_per_tap", "seed", "dko",
                                  "capture"});
  int version = io::kFormatVersion;
  top.integer("format_version", version);
  if (version != io::kFormatVersion)
    throw ValidationError("value error at $.format_version: unsupported version " + std::to_string(version));
  top.positive("wavelength_m", cfg.optics.wavelength_m);
  top.positive("sensor_distance_m", cfg.optics.sensor_distance_m);
  top.integer("grid_n", cfg.grid_n);
  if (cfg.grid_n < 2) throw ValidationError("value error at $.grid_n: must be >= 2");
  top.positive("pitch_m", cfg.pitch_m);
  if (top.has("aperture_diameter_m")) {
    double d = 0.0;
    top.real("aperture_diameter_m", d);
    if (d < 0.0) throw ValidationError("value error at $.aperture_diameter_m: must be >= 0");
    cfg.aperture_diameter_m = d;
  }
  top.integer("padding_factor", cfg.padding_factor);
  if (cfg.padding_factor < 1) throw ValidationError("value error at $.padding_factor: must be >= 1");
  top.integer("samples_per_tap", cfg.samples_per_tap);
  if (cfg.samples_per_tap < 1) throw ValidationError("value error at $.samples_per_tap: must be >= 1");
  top.integer("seed", cfg.seed);
  cfg.dko.seed = cfg.seed;
  cfg.capture.seed = cfg.seed;
  cfg.capture.samples_per_tap = cfg.samples_per_tap;

  if (j.contains("dko")) {
    const detail::ConfigReader d(j.at("dko"), "$.dko",
                                 {"max_iters", "lr", "optimizer", "beta1", "beta2", "epsilon", "init",
                                  "init_sigma_rad", "rel_tol", "patience", "fit_gain"});
    d.integer("max_iters", cfg.dko.max_iters);
    d.positive("lr", cfg.dko.lr);
    if (auto s = d.string("optimizer")) cfg.dko.optimizer = detail::parse_optimizer(*s, d.at("optimizer"));
    d.real("beta1", cfg.dko.beta1);
    d.real("beta2", cfg.dko.beta2);
    d.positive("epsilon", cfg.dko.epsilon);
    if (auto s = d.string("init")) cfg.dko.init = detail::parse_init(*s, d.at("init"));
    d.real("init_sigma_rad", cfg.dko.init_sigma_rad);
    d.real("rel_tol", cfg.dko.rel_tol);
    d.integer("patience", cfg.dko.patience);
    d.boolean("fit_gain", cfg.dko.fit_gain);
  }
  if (j.contains("capture")) {
    const detail::ConfigReader c(j.at("capture"), "$.capture",
                                 {"stride", "noise", "noise_sigma", "poisson_scale", "quantization_bits"});
    c.integer("stride", cfg.capture.stride);
    if (auto s = c.string("noise")) cfg.capture.noise = detail::parse_noise_kind(*s, c.at("noise"));
    c.real("noise_sigma", cfg.capture.noise_sigma);
    c.positive("poisson_scale", cfg.capture.poisson_scale);
    if (c.has("quantization_bits")) {
      int bits = 0;
      c.integer("quantization_bits", bits);
      cfg.capture.quantization_bits = bits;
    }
  }
  try {
    cfg.dko.validate();
    cfg.capture.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_json(path));
}

/// The effective configuration, suitable for echoing into reports and for re-loading.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["format_version"] = io::kFormatVersion;
  j["wavelength_m"] = c.optics.wavelength_m;
  j["sensor_distance_m"] = c.optics.sensor_distance_m;
  j["grid_n"] = c.grid_n;
  j["pitch_m"] = c.pitch_m;
  j["aperture_diameter_m"] = c.aperture_diameter_m ? nlohmann::json(*c.aperture_diameter_m) : nlohmann::json(nullptr);
  j["padding_factor"] = c.padding_factor;
  j["samples_per_tap"] = c.samples_per_tap;
  j["seed"] = c.seed;
  j["dko"] = {{"max_iters", c.dko.max_iters},
              {"lr", c.dko.lr},
              {"optimizer", to_string(c.dko.optimizer)},
              {"beta1", c.dko.beta1},
              {"beta2", c.dko.beta2},
              {"epsilon", c.dko.epsilon},
              {"init", to_string(c.dko.init)},
              {"init_sigma_rad", c.dko.init_sigma_rad},
              {"rel_tol", c.dko.rel_tol},
              {"patience", c.dko.patience},
              {"fit_gain", c.dko.fit_gain}};
  j["capture"] = {{"stride", c.capture.stride},
                  {"noise", detail::to_string(c.capture.noise)},
                  {"noise_sigma", c.capture.noise_sigma},
                  {"poisson_scale", c.capture.poisson_scale},
                  {"quantization_bits", c.capture.quantization_bits ? nlohmann::json(*c.capture.quantization_bits)
                                                                    : nlohmann::json(nullptr)}};
  return j;
}

}  // namespace metaforge
