#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metaforge/bench.hpp"
#include "metaforge/capture.hpp"
#include "metaforge/dko.hpp"
#include "metaforge/eval.hpp"
#include "metaforge/kernels.hpp"
#include "metaforge/runconfig.hpp"
#include "metaforge/selftest.hpp"
#include "metaforge/tensorio.hpp"

// The `metaforge` command-line tool. Commands live here rather than in
// tools/ so tests can drive them in-process.

namespace metaforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommandOutcome {
  int exit_code = 0;
  std::optional<fs::path> report_path;
};

inline int exit_code_for(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::validation:
    case ErrorCategory::bounds:
    case ErrorCategory::shape: return 1;
    case ErrorCategory::numeric: return 2;
    case ErrorCategory::io: return 3;
  }
  return 2;
}

/// Options shared by every subcommand.
struct GlobalOptions {
  bool json = false;
  std::optional<std::size_t> jobs;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> config;
};

namespace detail {

inline std::string element_file(const char* stem, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.npy", stem, index);
  return buf;
}

inline std::size_t resolve_jobs(const GlobalOptions& g) {
  if (g.jobs) {
    if (*g.jobs < 1) throw ValidationError("--jobs must be >= 1");
    return *g.jobs;
  }
  if (const char* env = std::getenv("METAFORGE_JOBS"); env && *env) {
    try {
      std::size_t used = 0;
      const long v = std::stol(env, &used);
      if (used == std::string(env).size() && v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ValidationError(std::string("METAFORGE_JOBS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Config file (if any), then command-line flags on top.
inline RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = g.config ? load_config(*g.config) : RunConfig{};
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.dko.seed = *g.seed;
    cfg.capture.seed = *g.seed;
  }
  return cfg;
}

inline json metrics_json(const KernelMatchReport& m) {
  return {{"ncc", m.ncc_defined() ? json(m.ncc) : json(nullptr)}, {"rmse", m.rmse}, {"mae", m.mae}};
}

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << v;
  return ss.str();
}

inline void finish(const json& report, const std::optional<fs::path>& path, const GlobalOptions& g,
                   std::ostream& out, CommandOutcome& outcome) {
  if (path) {
    io::write_json(report, *path);
    outcome.report_path = *path;
  }
  if (g.json) out << report.dump(2) << "\n";
}

inline SceneImage load_scene(const fs::path& path) {
  const std::string ext = path.extension().string();
  SceneImage scene;
  if (ext == ".pgm" || ext == ".ppm") {
    scene.channels = io::decode_pnm(io::read_file(path)).channels;
  } else {
    const Tensor t = io::load_tensor(path);
    if (t.shape.size() == 2) {
      scene.channels.push_back(t.to_matrix());
    } else if (t.shape.size() == 3 && t.shape[2] == 3) {
      const std::size_t H = t.shape[0], W = t.shape[1];
      scene.channels.assign(3, RealMatrix(H, W));
      for (std::size_t i = 0; i < H * W; ++i)
        for (std::size_t c = 0; c < 3; ++c) scene.channels[c][i] = t.data[i * 3 + c];
    } else {
      throw ShapeError("scene must be HxW or HxWx3, got " + t.shape_string());
    }
  }
  scene.validate();
  return scene;
}

inline std::pair<NoiseKind, double> parse_noise(const std::string& text) {
  if (text == "none") return {NoiseKind::none, 0.0};
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  double value = 0.0;
  try {
    if (colon == std::string::npos) throw std::invalid_argument("missing value");
    std::size_t used = 0;
    value = std::stod(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ValidationError("--noise expects none, gaussian:<sigma> or poisson:<scale>, got '" + text + "'");
  }
  if (kind == "gaussian") return {NoiseKind::gaussian, value};
  if (kind == "poisson") return {NoiseKind::poisson, value};
  throw ValidationError("unknown noise model '" + kind + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("expected a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  return out;
}

/// "grid=128,elements=12,scene=64,k=11,batch=4"; omitted keys keep defaults.
inline BenchSizes parse_sizes(const std::string& s) {
  BenchSizes sizes;
  if (s.empty()) return sizes;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("--sizes entries look like key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const auto vals = parse_size_list(item.substr(eq + 1));
    const std::size_t v = vals.at(0);
    if (key == "grid") sizes.grid_n = v;
    else if (key == "elements") sizes.elements = v;
    else if (key == "scene") sizes.scene_n = v;
    else if (key == "k") sizes.kernel_k = v;
    else if (key == "batch") sizes.batch = v;
    else throw ValidationError("unknown --sizes key '" + key + "'");
  }
  return sizes;
}

inline json sizes_json(const BenchSizes& s) {
  return {{"grid", s.grid_n}, {"elements", s.elements}, {"scene", s.scene_n}, {"k", s.kernel_k}, {"batch", s.batch}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// A `dko optimize` output directory, re-read by capture and eval.

struct DesignResults {
  RunConfig config;
  ArrayPlan plan;
  std::vector<SignedKernel> kernels;  // true-convolution taps, ordered (channel, color)
  std::vector<RealizedPair> pairs;    // same order; empty PSFs for failed kernels
  std::vector<bool> ok;
  std::size_t kernel_taps = 0;
};

inline DesignResults load_results(const fs::path& dir) {
  const json summary = io::read_json(dir / "summary.json");
  DesignResults r;
  try {
    r.config = parse_config(summary.at("config"));
    r.plan = plan_from_json(summary.at("plan"));
  } catch (const json::exception& e) {
    throw ValidationError((dir / "summary.json").string() + ": " + e.what());
  }
  r.kernels = import_first_layer(io::load_tensor(dir / "targets.npy"), r.config.tap_pitch_m());
  r.kernel_taps = r.kernels.front().taps.rows();
  const std::size_t C = colors_per_channel(r.plan.color_mode);
  if (r.kernels.size() != r.plan.output_channels * C)
    throw ShapeError("targets.npy does not match the stored plan");
  const SensorGrid sensor = sensor_grid(r.config.grid(), r.config.optics, r.config.propagation());
  const auto& gains = summary.at("kernels");
  for (std::size_t i = 0; i < r.kernels.size(); ++i) {
    const std::size_t l = i / C, c = i % C;
    const std::size_t ip = plan_element_index(l, c, C, Sign::plus);
    const std::size_t im = plan_element_index(l, c, C, Sign::minus);
    RealizedPair pair;
    const bool ok = fs::exists(dir / detail::element_file("psf", ip)) && fs::exists(dir / detail::element_file("psf", im));
    if (ok) {
      pair.plus = {sensor, io::load_matrix(dir / detail::element_file("psf", ip))};
      pair.minus = {sensor, io::load_matrix(dir / detail::element_file("psf", im))};
      pair.gain = gains.at(i).at("gain").get<double>();
    }
    r.pairs.push_back(std::move(pair));
    r.ok.push_back(ok);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands

struct DkoOptimizeArgs {
  std::string kernels;
  std::string plan = "rgb-signed";
  std::string out;
  bool dump_grad = false;
  std::optional<std::size_t> max_iters;
};

inline CommandOutcome dko_optimize(const DkoOptimizeArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  RunConfig cfg = detail::resolve_config(g);
  if (a.max_iters) cfg.dko.max_iters = *a.max_iters;
  const fs::path dir = a.out;
  cfg.dko.snapshot_dir = dir / "snapshots";
  cfg.dko.validate();
  const std::size_t jobs = detail::resolve_jobs(g);

  const Tensor weights = io::load_tensor(a.kernels);
  const auto kernels = import_first_layer(weights, cfg.tap_pitch_m());
  const ColorMode mode = parse_color_mode(a.plan);
  const std::size_t C = colors_per_channel(mode);
  if (weights.shape[1] != C)
    throw ShapeError("plan " + a.plan + " needs " + std::to_string(C) + " input channels, kernels have " +
                     std::to_string(weights.shape[1]));
  const ArrayPlan plan = plan_array(weights.shape[0], mode);
  const DkoProblem problem(cfg.aperture(), cfg.optics, cfg.propagation());
  if (const auto w = paraxial_warning(cfg.grid(), cfg.optics)) out << "warning: " << *w << "\n";

  std::vector<LayerTarget> targets;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const auto halves = split_signed(kernels[i]);
    const std::size_t l = i / C, c = i % C;
    targets.push_back({plan_element_index(l, c, C, Sign::plus), plan_element_index(l, c, C, Sign::minus),
                       embed_target(halves.plus, problem.sensor(), cfg.samples_per_tap),
                       embed_target(halves.minus, problem.sensor(), cfg.samples_per_tap)});
  }
  const auto outcomes = optimize_layer(problem, targets, cfg.dko, jobs);

  fs::create_directories(dir);
  io::save_tensor(weights, dir / "targets.npy");
  io::write_json(plan_to_json(plan), dir / "plan.json");

  json elements = json::array(), kernel_rows = json::array(), failures = json::array();
  std::vector<std::string> header;
  std::vector<std::vector<double>> curves;
  std::vector<KernelMatchReport> signed_reports;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    const auto& t = targets[i];
    if (!o.ok()) {
      failures.push_back({{"kernel", i}, {"elements", {t.plus_element, t.minus_element}}, {"error", o.error}});
      kernel_rows.push_back({{"kernel", i}, {"gain", nullptr}, {"error", o.error}});
      out << "kernel " << i << " failed: " << o.error << "\n";
      continue;
    }
    const auto& [rp, rm] = *o.results;
    for (const DkoResult* r : {&rp, &rm}) {
      io::save_matrix(r->phase.values, dir / detail::element_file("phase", r->element));
      io::save_matrix(r->realized_psf.values, dir / detail::element_file("psf", r->element));
      if (a.dump_grad) {
        const EmbeddedTarget& tg = r == &rp ? t.plus : t.minus;
        const auto ev = evaluate_at_gain(problem, problem.forward(r->phase), tg, r->gain, true);
        io::save_matrix(ev.gradient, dir / detail::element_file("grad", r->element));
      }
      elements.push_back({{"element", r->element},
                          {"gain", r->gain},
                          {"final_loss", r->final_loss},
                          {"iterations", r->iterations_run},
                          {"stop_reason", to_string(r->stop_reason)},
                          {"metrics", detail::metrics_json(r->kernel_metrics)}});
      header.push_back("element_" + std::to_string(r->element));
      curves.push_back(r->loss_curve);
    }
    const auto sm = signed_kernel_metrics(rp, rm, t.plus, t.minus);
    signed_reports.push_back(sm);
    kernel_rows.push_back({{"kernel", i},
                           {"channel", i / C},
                           {"color", to_string(kernels[i].channel)},
                           {"gain", rp.gain},
                           {"metrics", detail::metrics_json(sm)}});
  }
  io::write_file_atomic(dir / "loss_curves.csv", io::encode_csv(header, curves));

  json report = {{"format_version", io::kFormatVersion},
                 {"command", "dko optimize"},
                 {"seed", cfg.seed},
                 {"jobs", jobs},
                 {"config", config_to_json(cfg)},
                 {"plan", plan_to_json(plan)},
                 {"elements", elements},
                 {"kernels", kernel_rows},
                 {"failures", failures}};
  if (!signed_reports.empty()) report["layer_metrics"] = detail::metrics_json(layer_metrics(signed_reports));
  detail::finish(report, dir / "summary.json", g, out, outcome);
  if (!g.json) {
    out << "optimized " << signed_reports.size() << "/" << outcomes.size() << " kernels ("
        << plan.elements.size() << " metasurfaces) -> " << dir.string() << "\n";
    if (!signed_reports.empty()) {
      const auto lm = layer_metrics(signed_reports);
      out << "mean NCC " << detail::fmt(lm.ncc) << "  RMSE " << detail::fmt(lm.rmse) << "  MAE "
          << detail::fmt(lm.mae) << "\n";
    }
  }
  if (!failures.empty()) outcome.exit_code = 2;
  return outcome;
}

struct RenderPsfArgs {
  std::string phase;
  std::string out;
  bool pgm = false;
};

inline CommandOutcome dko_render_psf(const RenderPsfArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  RunConfig cfg = detail::resolve_config(g);
  RealMatrix phase = io::load_matrix(a.phase);
  if (phase.rows() != cfg.grid_n || phase.cols() != cfg.grid_n)
    throw ShapeError("phase is " + std::to_string(phase.rows()) + "x" + std::to_string(phase.cols()) +
                     " but the config grid is " + std::to_string(cfg.grid_n));
  const auto mod = make_modulation(PhaseProfile{cfg.grid(), std::move(phase)}, cfg.aperture());
  const Psf psf = fresnel_psf(mod, cfg.optics, cfg.propagation());
  const fs::path dst = a.out;
  io::save_matrix(psf.values, dst);
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "dko render-psf"},
                 {"config", config_to_json(cfg)},
                 {"psf", dst.string()},
                 {"sensor_pitch_m", psf.sensor.pitch_m},
                 {"total_power", sum(psf.values)}};
  if (a.pgm) {
    fs::path preview = dst;
    preview.replace_extension(".pgm");
    io::write_file_atomic(preview, io::encode_pgm_preview(psf.values));
    report["preview"] = preview.string();
  }
  fs::path rp = dst;
  rp.replace_extension(".json");
  detail::finish(report, rp, g, out, outcome);
  if (!g.json) out << "rendered " << psf.values.rows() << "x" << psf.values.cols() << " PSF -> " << dst.string() << "\n";
  return outcome;
}

struct SplitArgs {
  std::string kernels;
  std::string plan = "rgb-signed";
  std::string out;
};

inline CommandOutcome kernels_split(const SplitArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const RunConfig cfg = detail::resolve_config(g);
  const Tensor weights = io::load_tensor(a.kernels);
  const auto kernels = import_first_layer(weights, cfg.tap_pitch_m());
  const ColorMode mode = parse_color_mode(a.plan);
  const std::size_t C = colors_per_channel(mode);
  if (weights.shape[1] != C)
    throw ShapeError("plan " + a.plan + " needs " + std::to_string(C) + " input channels, kernels have " +
                     std::to_string(weights.shape[1]));
  const ArrayPlan plan = plan_array(weights.shape[0], mode);
  const fs::path dir = a.out;
  fs::create_directories(dir);
  io::write_json(plan_to_json(plan), dir / "plan.json");
  json halves = json::array();
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const auto pair = split_signed(kernels[i]);
    const std::size_t l = i / C, c = i % C;
    const std::size_t ip = plan_element_index(l, c, C, Sign::plus);
    const std::size_t im = plan_element_index(l, c, C, Sign::minus);
    io::save_matrix(pair.plus, dir / detail::element_file("half", ip));
    io::save_matrix(pair.minus, dir / detail::element_file("half", im));
    halves.push_back({{"kernel", i}, {"plus", ip}, {"minus", im}, {"plus_mass", sum(pair.plus)},
                      {"minus_mass", sum(pair.minus)}});
  }
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "kernels split"},
                 {"config", config_to_json(cfg)},
                 {"plan", plan_to_json(plan)},
                 {"kernels", halves}};
  detail::finish(report, dir / "split.json", g, out, outcome);
  if (!g.json) out << "split " << kernels.size() << " kernels into " << plan.elements.size() << " halves -> " << dir.string() << "\n";
  return outcome;
}

struct CaptureArgs {
  std::string scene;
  std::string results;
  std::string out;
  std::optional<std::string> noise;
  bool compare_electronic = false;
};

inline CommandOutcome capture_simulate(const CaptureArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const DesignResults res = load_results(a.results);
  CaptureConfig cc = g.config ? load_config(*g.config).capture : res.config.capture;
  cc.samples_per_tap = res.config.samples_per_tap;
  std::uint64_t seed = g.config ? load_config(*g.config).seed : res.config.seed;
  if (g.seed) seed = *g.seed;
  cc.seed = seed;
  if (a.noise) {
    const auto [kind, value] = detail::parse_noise(*a.noise);
    cc.noise = kind;
    if (kind == NoiseKind::gaussian) cc.noise_sigma = value;
    if (kind == NoiseKind::poisson) cc.poisson_scale = value;
  }
  for (std::size_t i = 0; i < res.ok.size(); ++i)
    if (!res.ok[i]) throw ValidationError("results are missing the PSFs of kernel " + std::to_string(i));

  const SceneImage scene = detail::load_scene(a.scene);
  if (scene.channels.size() != colors_per_channel(res.plan.color_mode))
    throw ShapeError("scene has " + std::to_string(scene.channels.size()) + " channels, plan " +
                     to_string(res.plan.color_mode) + " expects " +
                     std::to_string(colors_per_channel(res.plan.color_mode)));
  std::vector<std::string> warnings;
  const FeatureMap fm = simulate_capture(scene, res.pairs, res.kernel_taps, cc, &warnings);
  for (const auto& w : warnings) out << "warning: " << w << "\n";

  const std::size_t L = fm.channels.size();
  const std::size_t H = fm.channels.front().rows(), W = fm.channels.front().cols();
  std::vector<double> flat;
  flat.reserve(L * H * W);
  for (const auto& ch : fm.channels) flat.insert(flat.end(), ch.begin(), ch.end());
  const Tensor t({L, H, W}, std::move(flat));
  const fs::path dst = a.out;
  io::save_tensor(t, dst);

  RunConfig echoed = res.config;
  echoed.capture = cc;
  echoed.seed = seed;
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "capture simulate"},
                 {"seed", seed},
                 {"config", config_to_json(echoed)},
                 {"features", dst.string()},
                 {"shape", {L, H, W}},
                 {"warnings", warnings}};
  if (a.compare_electronic) {
    FeatureMap ref = electronic_conv(scene, res.kernels, cc.stride, Padding::valid);
    // With sub-tap sampling the binned optical map can be one tap short of the electronic one.
    for (auto& ch : ref.channels) {
      if (ch.rows() < H || ch.cols() < W) throw ShapeError("electronic reference smaller than the capture");
      RealMatrix cropped(H, W);
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) cropped(r, c) = ch(r, c);
      ch = std::move(cropped);
    }
    const double rel = relative_l2(fm, ref);
    report["relative_l2_vs_electronic"] = rel;
    if (!g.json) out << "relative L2 vs electronic conv: " << detail::fmt(rel) << "\n";
  }
  fs::path rp = dst;
  rp.replace_extension(".json");
  detail::finish(report, rp, g, out, outcome);
  if (!g.json) out << "captured " << L << " feature maps of " << H << "x" << W << " -> " << dst.string() << "\n";
  return outcome;
}

struct EvalKernelsArgs {
  std::string realized;
  std::string targets;
  std::string report;
};

inline CommandOutcome eval_kernels(const EvalKernelsArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const DesignResults res = load_results(a.realized);
  const auto targets = import_first_layer(io::load_tensor(a.targets), res.config.tap_pitch_m());
  if (targets.size() != res.kernels.size()) throw ShapeError("target kernel count does not match the results");
  json rows = json::array();
  std::vector<KernelMatchReport> reports;
  std::vector<double> col_k, col_ncc, col_rmse, col_mae;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!res.ok[i]) {
      rows.push_back({{"kernel", i}, {"error", "missing PSFs"}});
      continue;
    }
    const auto halves = split_signed(targets[i]);
    const SensorGrid& sensor = res.pairs[i].plus.sensor;
    const auto tp = embed_target(halves.plus, sensor, res.config.samples_per_tap);
    const auto tm = embed_target(halves.minus, sensor, res.config.samples_per_tap);
    const auto m = signed_kernel_metrics(res.pairs[i].plus, res.pairs[i].minus, res.pairs[i].gain, tp, tm);
    reports.push_back(m);
    rows.push_back({{"kernel", i}, {"metrics", detail::metrics_json(m)}});
    col_k.push_back(static_cast<double>(i));
    col_ncc.push_back(m.ncc);
    col_rmse.push_back(m.rmse);
    col_mae.push_back(m.mae);
  }
  if (reports.empty()) throw ValidationError("no realized kernels to evaluate");
  const auto lm = layer_metrics(reports);
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "eval kernels"},
                 {"config", config_to_json(res.config)},
                 {"kernels", rows},
                 {"layer_metrics", detail::metrics_json(lm)}};
  const fs::path rp = a.report;
  fs::path csv = rp;
  csv.replace_extension(".csv");
  io::write_file_atomic(csv, io::encode_csv({"kernel", "ncc", "rmse", "mae"}, {col_k, col_ncc, col_rmse, col_mae}));
  detail::finish(report, rp, g, out, outcome);
  if (!g.json) {
    out << "kernel       ncc        rmse        mae\n";
    for (std::size_t i = 0; i < col_k.size(); ++i)
      out << std::setw(6) << col_k[i] << "  " << std::setw(10) << detail::fmt(col_ncc[i]) << "  " << std::setw(10)
          << detail::fmt(col_rmse[i]) << "  " << std::setw(10) << detail::fmt(col_mae[i]) << "\n";
    out << "mean    " << std::setw(10) << detail::fmt(lm.ncc) << "  " << std::setw(10) << detail::fmt(lm.rmse)
        << "  " << std::setw(10) << detail::fmt(lm.mae) << "\n";
  }
  return outcome;
}

struct EvalDepthArgs {
  std::string pred;
  std::string gt;
  std::optional<std::string> mask;
  std::optional<std::string> report;
};

inline CommandOutcome eval_depth(const EvalDepthArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const RealMatrix pred = io::load_matrix(a.pred);
  const RealMatrix gt = io::load_matrix(a.gt);
  const RealMatrix mask = a.mask ? io::load_matrix(*a.mask) : RealMatrix(gt.rows(), gt.cols(), 1.0);
  const auto m = depth_metrics(pred, gt, mask);
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "eval depth"},
                 {"absrel", m.absrel},
                 {"sqrel", m.sqrel},
                 {"rmse_m", m.rmse_m},
                 {"rms_log", m.rms_log},
                 {"delta1", m.delta1},
                 {"delta2", m.delta2},
                 {"delta3", m.delta3}};
  std::optional<fs::path> rp;
  if (a.report) {
    rp = *a.report;
    fs::path csv = *rp;
    csv.replace_extension(".csv");
    io::write_file_atomic(csv, io::encode_csv({"absrel", "sqrel", "rmse_m", "rms_log", "delta1", "delta2", "delta3"},
                                              {{m.absrel}, {m.sqrel}, {m.rmse_m}, {m.rms_log}, {m.delta1},
                                               {m.delta2}, {m.delta3}}));
  }
  detail::finish(report, rp, g, out, outcome);
  if (!g.json)
    out << "absrel " << detail::fmt(m.absrel) << "  sqrel " << detail::fmt(m.sqrel) << "  rmse " << detail::fmt(m.rmse_m)
        << " m  rms_log " << detail::fmt(m.rms_log) << "  d1 " << detail::fmt(m.delta1) << "  d2 "
        << detail::fmt(m.delta2) << "  d3 " << detail::fmt(m.delta3) << "\n";
  return outcome;
}

struct AccountingArgs {
  std::string plan = "rgb-signed";
  std::uint64_t L = 64;
  std::uint64_t C = 3;
  std::uint64_t k = 7;
  std::size_t grid = 1025;
  std::optional<std::string> report;
};

inline CommandOutcome bench_accounting(const AccountingArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const ColorMode mode = parse_color_mode(a.plan);
  if (a.C != colors_per_channel(mode))
    throw ValidationError("--C " + std::to_string(a.C) + " does not match plan " + a.plan);
  if (a.L < 1 || a.k < 1) throw ValidationError("--L and --k must be >= 1");
  const ArrayPlan plan = plan_array(a.L, mode);
  const auto acc = count_parameters(plan, GridSpec::square(a.grid, 2.5e-6), a.L, a.C, a.k);
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "bench accounting"},
                 {"plan", a.plan},
                 {"elements", plan.elements.size()},
                 {"grid", a.grid},
                 {"L", a.L},
                 {"C", a.C},
                 {"k", a.k},
                 {"optical_params", acc.optical_params},
                 {"electronic_first_layer_params", acc.electronic_first_layer_params},
                 {"optical_params_rounded", human_count(acc.optical_params)},
                 {"electronic_first_layer_params_rounded", human_count(acc.electronic_first_layer_params)},
                 {"ratio", acc.ratio}};
  if (a.report) detail::finish(report, std::filesystem::path(*a.report), g, out, outcome);
  else detail::finish(report, std::nullopt, g, out, outcome);
  if (!g.json)
    out << "metasurfaces                   " << plan.elements.size() << " x " << a.grid << "^2\n"
        << "optical_params                 " << acc.optical_params << " (" << human_count(acc.optical_params) << ")\n"
        << "electronic_first_layer_params  " << acc.electronic_first_layer_params << " ("
        << human_count(acc.electronic_first_layer_params) << ")\n";
  return outcome;
}

struct StepsArgs {
  std::string modes = "dko,e2e,electronic";
  std::string sizes;
  std::size_t repeats = 5;
  std::size_t dko_iters = 2000;
  std::size_t e2e_steps = 200;
  std::optional<std::string> out;
};

inline CommandOutcome bench_steps(const StepsArgs& a, const GlobalOptions& g, std::ostream& out) {
  CommandOutcome outcome;
  const BenchSizes sizes = detail::parse_sizes(a.sizes);
  const std::uint64_t seed = g.seed.value_or(0);
  std::vector<BenchMode> modes;
  std::stringstream ss(a.modes);
  for (std::string m; std::getline(ss, m, ',');) modes.push_back(parse_bench_mode(m));
  if (modes.empty()) throw ValidationError("--modes is empty");

  json timings = json::array();
  std::optional<double> dko_ms, e2e_ms;
  for (BenchMode m : modes) {
    const StepTiming t = time_step(m, sizes, a.repeats, seed);
    timings.push_back({{"mode", to_string(m)},
                       {"mean_ms", t.mean_ms},
                       {"std_ms", t.std_ms},
                       {"iterations_timed", t.iterations_timed},
                       {"loss", t.loss}});
    if (m == BenchMode::dko) dko_ms = t.mean_ms;
    if (m == BenchMode::e2e) e2e_ms = t.mean_ms;
    if (!g.json)
      out << std::left << std::setw(12) << to_string(m) << std::right << std::setw(12) << detail::fmt(t.mean_ms, 4)
          << " ms +/- " << detail::fmt(t.std_ms, 3) << " ms\n";
  }
  json report = {{"format_version", io::kFormatVersion},
                 {"command", "bench steps"},
                 {"seed", seed},
                 {"sizes", detail::sizes_json(sizes)},
                 {"timings", timings},
                 {"reference_step_ratio", 730.0}};
  if (dko_ms && e2e_ms) {
    const double ratio = *e2e_ms / *dko_ms;
    const double projected = ratio * static_cast<double>(a.e2e_steps) / static_cast<double>(a.dko_iters);
    report["e2e_over_dko"] = ratio;
    report["projected_convergence_ratio"] = projected;
    report["projection_steps"] = {{"dko", a.dko_iters}, {"e2e", a.e2e_steps}};
    if (!g.json)
      out << "e2e/dko step ratio " << detail::fmt(ratio, 4) << " (reference hardware: 730)\n"
          << "projected convergence ratio " << detail::fmt(projected, 4) << " (" << a.e2e_steps << " e2e steps vs "
          << a.dko_iters << " dko iterations)\n";
  }
  std::optional<fs::path> rp;
  if (a.out) rp = *a.out;
  detail::finish(report, rp, g, out, outcome);
  return outcome;
}

inline CommandOutcome run_selftest(const std::optional<std::string>& report_path, const GlobalOptions& g,
                                   std::ostream& out) {
  CommandOutcome outcome;
  const std::uint64_t seed = g.seed.value_or(1);
  const auto checks = selftest::run_all(seed);
  json rows = json::array();
  bool all = true;
  for (const auto& c : checks) {
    all = all && c.passed;
    rows.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"tolerance", c.tolerance}});
    if (!g.json)
      out << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(20) << c.name << std::right
          << detail::fmt(c.value, 3) << " (tol " << detail::fmt(c.tolerance, 3) << ")\n";
  }
  json report = {{"format_version", io::kFormatVersion}, {"command", "selftest"}, {"seed", seed}, {"checks", rows},
                 {"passed", all}};
  std::optional<fs::path> rp;
  if (report_path) rp = *report_path;
  detail::finish(report, rp, g, out, outcome);
  outcome.exit_code = all ? 0 : 2;
  return outcome;
}

// ---------------------------------------------------------------------------

/// Parses argv, runs one command, and maps failures to exit codes.
inline CommandOutcome run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Metasurface first-layer design, capture simulation and benchmarking", "metaforge"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::size_t jobs = 0;
  std::uint64_t seed = 0;
  std::string config;
  app.add_flag("--json", g.json, "Print the JSON report on stdout");
  auto* jobs_opt = app.add_option("--jobs", jobs, "Worker threads (default: METAFORGE_JOBS or all cores)");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every stochastic step");
  auto* config_opt = app.add_option("--config", config, "RunConfig JSON; command-line flags take precedence");

  std::function<CommandOutcome()> action;

  auto* dko = app.add_subcommand("dko", "Direct kernel optimization");
  dko->require_subcommand(1);
  DkoOptimizeArgs opt_args;
  auto* dko_opt = dko->add_subcommand("optimize", "Design one metasurface per kernel half");
  dko_opt->add_option("--kernels", opt_args.kernels, "First-layer weights, NPY (L, C, k, k)")->required();
  dko_opt->add_option("--plan", opt_args.plan, "mono-signed or rgb-signed")->capture_default_str();
  dko_opt->add_option("--out", opt_args.out, "Output directory")->required();
  dko_opt->add_flag("--dump-grad", opt_args.dump_grad, "Also write the final phase gradients");
  dko_opt->add_option("--max-iters", opt_args.max_iters, "Override dko.max_iters");
  dko_opt->callback([&] { action = [&] { return dko_optimize(opt_args, g, out); }; });

  RenderPsfArgs render_args;
  auto* dko_render = dko->add_subcommand("render-psf", "PSF of a phase profile");
  dko_render->add_option("--phase", render_args.phase, "Phase map, NPY")->required();
  dko_render->add_option("--out", render_args.out, "Output NPY")->required();
  dko_render->add_flag("--pgm", render_args.pgm, "Also write a max-normalized PGM preview");
  dko_render->callback([&] { action = [&] { return dko_render_psf(render_args, g, out); }; });

  auto* kern = app.add_subcommand("kernels", "Kernel preprocessing");
  kern->require_subcommand(1);
  SplitArgs split_args;
  auto* split = kern->add_subcommand("split", "Split signed kernels into non-negative halves");
  split->add_option("--kernels", split_args.kernels, "First-layer weights, NPY (L, C, k, k)")->required();
  split->add_option("--plan", split_args.plan, "mono-signed or rgb-signed")->capture_default_str();
  split->add_option("--out", split_args.out, "Output directory")->required();
  split->callback([&] { action = [&] { return kernels_split(split_args, g, out); }; });

  auto* cap = app.add_subcommand("capture", "Opto-electronic capture");
  cap->require_subcommand(1);
  CaptureArgs cap_args;
  auto* sim = cap->add_subcommand("simulate", "Simulate first-layer feature maps through the designed optics");
  sim->add_option("--scene", cap_args.scene, "Scene: NPY (HxW, HxWx3) or PGM/PPM")->required();
  sim->add_option("--results", cap_args.results, "Directory written by dko optimize")->required();
  sim->add_option("--out", cap_args.out, "Output feature maps, NPY (L, H, W)")->required();
  sim->add_option("--noise", cap_args.noise, "none | gaussian:<sigma> | poisson:<scale>");
  sim->add_flag("--compare-electronic", cap_args.compare_electronic, "Report relative L2 against electronic conv");
  sim->callback([&] { action = [&] { return capture_simulate(cap_args, g, out); }; });

  auto* ev = app.add_subcommand("eval", "Metrics");
  ev->require_subcommand(1);
  EvalKernelsArgs ek_args;
  auto* ek = ev->add_subcommand("kernels", "Realized vs target kernels");
  ek->add_option("--realized", ek_args.realized, "Directory written by dko optimize")->required();
  ek->add_option("--targets", ek_args.targets, "First-layer weights, NPY (L, C, k, k)")->required();
  ek->add_option("--report", ek_args.report, "Report JSON (a CSV is written beside it)")->required();
  ek->callback([&] { action = [&] { return eval_kernels(ek_args, g, out); }; });

  EvalDepthArgs ed_args;
  auto* ed = ev->add_subcommand("depth", "Depth-map error metrics");
  ed->add_option("--pred", ed_args.pred, "Predicted depth, NPY")->required();
  ed->add_option("--gt", ed_args.gt, "Ground-truth depth, NPY")->required();
  ed->add_option("--mask", ed_args.mask, "Valid-pixel mask, NPY (non-zero = valid)");
  ed->add_option("--report", ed_args.report, "Report JSON (a CSV is written beside it)");
  ed->callback([&] { action = [&] { return eval_depth(ed_args, g, out); }; });

  auto* bench = app.add_subcommand("bench", "Parameter accounting and step timing");
  bench->require_subcommand(1);
  AccountingArgs acc_args;
  auto* acc = bench->add_subcommand("accounting", "Optical vs electronic parameter counts");
  acc->add_option("--plan", acc_args.plan, "mono-signed or rgb-signed")->capture_default_str();
  acc->add_option("--L", acc_args.L, "Output channels")->capture_default_str();
  acc->add_option("--C", acc_args.C, "Input channels")->capture_default_str();
  acc->add_option("--k", acc_args.k, "Kernel size")->capture_default_str();
  acc->add_option("--grid", acc_args.grid, "Metasurface samples per side")->capture_default_str();
  acc->add_option("--report", acc_args.report, "Report JSON");
  acc->callback([&] { action = [&] { return bench_accounting(acc_args, g, out); }; });

  StepsArgs steps_args;
  auto* steps = bench->add_subcommand("steps", "Time one training step per mode");
  steps->add_option("--modes", steps_args.modes, "Comma list of dko, e2e, electronic")->capture_default_str();
  steps->add_option("--sizes", steps_args.sizes, "grid=,elements=,scene=,k=,batch=");
  steps->add_option("--repeats", steps_args.repeats, "Timed repeats per mode")->capture_default_str();
  steps->add_option("--dko-iters", steps_args.dko_iters, "DKO iterations used for the projection")->capture_default_str();
  steps->add_option("--e2e-steps", steps_args.e2e_steps, "E2E steps used for the projection")->capture_default_str();
  steps->add_option("--out", steps_args.out, "Report JSON");
  steps->callback([&] { action = [&] { return bench_steps(steps_args, g, out); }; });

  std::optional<std::string> selftest_report;
  auto* st = app.add_subcommand("selftest", "Run the embedded invariant checks");
  st->add_option("--report", selftest_report, "Report JSON");
  st->callback([&] { action = [&] { return run_selftest(selftest_report, g, out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return {0, std::nullopt};
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return {0, std::nullopt};
  } catch (const CLI::ParseError& e) {
    err << "error[validation]: " << e.what() << "\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().back();
    while (!sub->get_subcommands().empty()) sub = sub->get_subcommands().back();
    err << sub->help();
    return {1, std::nullopt};
  }
  if (jobs_opt->count()) g.jobs = jobs;
  if (seed_opt->count()) g.seed = seed;
  if (config_opt->count()) g.config = config;

  try {
    if (!action) throw ValidationError("no command given");
    return action();
  } catch (const Error& e) {
    err << "error[" << category_name(e.category()) << "]: " << e.what() << "\n";
    return {exit_code_for(e.category()), std::nullopt};
  } catch (const fs::filesystem_error& e) {
    err << "error[io]: " << e.what() << "\n";
    return {3, std::nullopt};
  } catch (const std::exception& e) {
    err << "error[numeric]: " << e.what() << "\n";
    return {2, std::nullopt};
  }
}

}  // namespace metaforge::cli
