#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "metaforge/adjoint.hpp"
#include "metaforge/capture.hpp"
#include "metaforge/dko.hpp"

namespace metaforge {

struct ParamAccount {
  std::uint64_t optical_params = 0;
  std::uint64_t electronic_first_layer_params = 0;
  double ratio = 0.0;
};

/// Optical parameters = elements × n_x × n_y; electronic = L·C·k². Exact integers.
inline ParamAccount count_parameters(const ArrayPlan& plan, const GridSpec& grid, std::uint64_t L,
                                     std::uint64_t C, std::uint64_t k) {
  ParamAccount a;
  a.optical_params = static_cast<std::uint64_t>(plan.elements.size()) * grid.n_x * grid.n_y;
  a.electronic_first_layer_params = L * C * k * k;
  a.ratio = a.electronic_first_layer_params
                ? static_cast<double>(a.optical_params) / static_cast<double>(a.electronic_first_layer_params)
                : 0.0;
  return a;
}

/// Rounds to the coarse "403M" / "9k" style used when quoting parameter counts.
inline std::string human_count(std::uint64_t n) {
  if (n >= 1'000'000) return std::to_string((n + 500'000) / 1'000'000) + "M";
  if (n >= 1'000) return std::to_string((n + 500) / 1'000) + "k";
  return std::to_string(n);
}

// ---------------------------------------------------------------------------
// Toy end-to-end optical training: metasurface phases + a linear per-pixel
// readout, trained jointly through the capture simulation.

struct E2eConfig {
  std::size_t grid_n = 128;
  double pitch_m = 2.5e-6;
  OpticalConfig optics;
  std::size_t elements = 12;  // element e feeds channel e/2 with sign (+ if even)
  std::size_t kernel_k = 11;
  std::size_t scene_n = 64;
  std::size_t batch = 4;
  std::size_t samples = 256;
  std::size_t steps = 200;
  double lr_phase = 0.02;
  double lr_readout = 0.01;
  std::uint64_t seed = 0;

  std::size_t channels() const { return (elements + 1) / 2; }
  std::size_t readout_size() const { return channels() + 1; }
};

struct E2eModel {
  std::vector<PhaseProfile> phases;
  std::vector<double> readout;  // channel weights, then bias
};

struct E2eDataset {
  std::vector<RealMatrix> scenes;
  std::vector<RealMatrix> targets;  // valid-region regression maps
};

struct E2eGradient {
  double loss = 0.0;
  std::vector<RealMatrix> phases;
  std::vector<double> readout;
};

/// Random-texture scenes with a hidden linear-conv teacher as the target.
inline E2eDataset make_e2e_dataset(const E2eConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0xda7a5e7ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t L = cfg.channels(), k = cfg.kernel_k;
  std::vector<RealMatrix> teacher;
  std::vector<double> w(L);
  for (std::size_t l = 0; l < L; ++l) {
    RealMatrix t(k, k);
    for (auto& v : t) v = nd(rng) / static_cast<double>(k * k);
    teacher.push_back(std::move(t));
    w[l] = nd(rng);
  }
  E2eDataset ds;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    RealMatrix s(cfg.scene_n, cfg.scene_n);
    for (auto& v : s) v = u(rng);
    RealMatrix y;
    for (std::size_t l = 0; l < L; ++l) {
      const RealMatrix f = convolve_valid(s, teacher[l]);
      if (y.empty()) y = RealMatrix(f.rows(), f.cols(), 0.0);
      for (std::size_t q = 0; q < y.size(); ++q) y[q] += w[l] * f[q];
    }
    ds.scenes.push_back(std::move(s));
    ds.targets.push_back(std::move(y));
  }
  return ds;
}

class E2eTrainer {
 public:
  explicit E2eTrainer(const E2eConfig& cfg)
      : cfg_(cfg),
        problem_(make_default_aperture(GridSpec::square(cfg.grid_n, cfg.pitch_m)), cfg.optics) {
    if (cfg.elements < 1) throw ValidationError("e2e needs at least one element");
    if (cfg.kernel_k > cfg.grid_n || cfg.kernel_k > cfg.scene_n)
      throw BoundsError("kernel crop larger than grid or scene");
    power_ = sum_squares(problem_.aperture().transmittance);
  }

  const DkoProblem& problem() const { return problem_; }
  const E2eConfig& config() const { return cfg_; }

  E2eModel initial_model() const {
    E2eModel m;
    DkoConfig init;
    init.seed = cfg_.seed;
    for (std::size_t e = 0; e < cfg_.elements; ++e) m.phases.push_back(initial_phase(problem_, init, e));
    std::mt19937_64 rng(cfg_.seed ^ 0x7ead07ULL);
    std::normal_distribution<double> nd(0.0, 0.1);
    m.readout.assign(cfg_.readout_size(), 0.0);
    for (std::size_t l = 0; l < cfg_.channels(); ++l) m.readout[l] = 1.0 + nd(rng);
    return m;
  }

  std::size_t parameter_count() const {
    return cfg_.elements * cfg_.grid_n * cfg_.grid_n + cfg_.readout_size();
  }

  /// Mean-squared regression loss over a batch and its gradient with respect
  /// to every phase and readout weight.
  E2eGradient loss_and_grad(const E2eModel& model, const std::vector<const RealMatrix*>& scenes,
                            const std::vector<const RealMatrix*>& targets, bool with_grad = true) const {
    const std::size_t E = cfg_.elements, L = cfg_.channels(), k = cfg_.kernel_k;
    std::vector<FresnelForward> fw;
    std::vector<RealMatrix> kern;
    fw.reserve(E);
    for (std::size_t e = 0; e < E; ++e) {
      fw.push_back(problem_.forward(model.phases[e]));
      RealMatrix c = center_window(fw.back().psf.values, k, k);
      for (auto& v : c) v /= power_;
      kern.push_back(std::move(c));
    }
    E2eGradient g;
    std::vector<RealMatrix> dkern(E, RealMatrix(k, k, 0.0));
    g.readout.assign(L + 1, 0.0);
    std::size_t count = 0;
    for (const auto* y : targets) count += y->size();
    const double norm = 1.0 / static_cast<double>(count);
    for (std::size_t b = 0; b < scenes.size(); ++b) {
      const RealMatrix& s = *scenes[b];
      std::vector<RealMatrix> feat(L);
      for (std::size_t e = 0; e < E; ++e) {
        const RealMatrix m = convolve_valid(s, kern[e]);
        auto& f = feat[e / 2];
        if (f.empty()) f = RealMatrix(m.rows(), m.cols(), 0.0);
        const double sign = e % 2 == 0 ? 1.0 : -1.0;
        for (std::size_t q = 0; q < f.size(); ++q) f[q] += sign * m[q];
      }
      const RealMatrix& y = *targets[b];
      RealMatrix err(y.rows(), y.cols());
      for (std::size_t q = 0; q < y.size(); ++q) {
        double p = model.readout[L];
        for (std::size_t l = 0; l < L; ++l) p += model.readout[l] * feat[l][q];
        err[q] = p - y[q];
        g.loss += err[q] * err[q] * norm;
      }
      if (!with_grad) continue;
      for (std::size_t q = 0; q < err.size(); ++q) {
        const double e2 = 2.0 * err[q] * norm;
        for (std::size_t l = 0; l < L; ++l) g.readout[l] += e2 * feat[l][q];
        g.readout[L] += e2;
      }
      // Adjoint of the valid convolution w.r.t. the kernel taps.
      for (std::size_t e = 0; e < E; ++e) {
        const double scale = 2.0 * norm * model.readout[e / 2] * (e % 2 == 0 ? 1.0 : -1.0);
        RealMatrix& dk = dkern[e];
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t bb = 0; bb < k; ++bb) {
            double acc = 0.0;
            for (std::size_t r = 0; r < err.rows(); ++r) {
              const double* srow = &s(r + k - 1 - a, k - 1 - bb);
              const double* erow = &err(r, 0);
              for (std::size_t c = 0; c < err.cols(); ++c) acc += erow[c] * srow[c];
            }
            dk(a, bb) += scale * acc;
          }
      }
    }
    if (!std::isfinite(g.loss)) throw NumericError("non-finite end-to-end loss");
    if (!with_grad) return g;
    const SensorGrid& sensor = problem_.sensor();
    for (std::size_t e = 0; e < E; ++e) {
      RealMatrix dpsf(sensor.n_v, sensor.n_u, 0.0);
      const std::size_t r0 = sensor.n_v / 2 - k / 2, c0 = sensor.n_u / 2 - k / 2;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) dpsf(r0 + a, c0 + b) = dkern[e](a, b) / power_;
      g.phases.push_back(psf_phase_vjp(fw[e], problem_.grid(), dpsf));
    }
    return g;
  }

 private:
  E2eConfig cfg_;
  DkoProblem problem_;
  double power_ = 1.0;
};

struct E2eReport {
  std::vector<double> loss_curve;
  double mean_step_ms = 0.0;
  std::size_t total_params = 0;
  std::size_t optical_params = 0;
  std::size_t readout_params = 0;
};

inline E2eReport e2e_toy_train(const E2eConfig& cfg) {
  E2eTrainer trainer(cfg);
  const E2eDataset ds = make_e2e_dataset(cfg);
  E2eModel model = trainer.initial_model();
  DkoConfig adam;
  adam.lr = cfg.lr_phase;
  std::vector<detail::PhaseStepper> steppers;
  const std::size_t n = cfg.grid_n * cfg.grid_n;
  for (std::size_t e = 0; e < cfg.elements; ++e) steppers.emplace_back(adam, n);
  DkoConfig adam_readout;
  adam_readout.lr = cfg.lr_readout;
  detail::PhaseStepper readout_stepper(adam_readout, cfg.readout_size());

  E2eReport rep;
  rep.optical_params = cfg.elements * cfg.grid_n * cfg.grid_n;
  rep.readout_params = cfg.readout_size();
  rep.total_params = trainer.parameter_count();
  double total_ms = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<const RealMatrix*> xs, ys;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t i = (step * cfg.batch + b) % ds.scenes.size();
      xs.push_back(&ds.scenes[i]);
      ys.push_back(&ds.targets[i]);
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto g = trainer.loss_and_grad(model, xs, ys);
    for (std::size_t e = 0; e < cfg.elements; ++e) steppers[e].step(model.phases[e].values, g.phases[e]);
    RealMatrix ro(1, model.readout.size(), model.readout), gro(1, g.readout.size(), g.readout);
    readout_stepper.step(ro, gro);
    model.readout = ro.storage();
    total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rep.loss_curve.push_back(g.loss);
  }
  rep.mean_step_ms = cfg.steps ? total_ms / static_cast<double>(cfg.steps) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Per-step timing

enum class BenchMode { dko, e2e, electronic };

inline const char* to_string(BenchMode m) {
  switch (m) {
    case BenchMode::dko: return "dko";
    case BenchMode::e2e: return "e2e";
    case BenchMode::electronic: return "electronic";
  }
  return "?";
}

inline BenchMode parse_bench_mode(const std::string& s) {
  if (s == "dko") return BenchMode::dko;
  if (s == "e2e") return BenchMode::e2e;
  if (s == "electronic") return BenchMode::electronic;
  throw ValidationError("unknown bench mode '" + s + "'");
}

struct BenchSizes {
  std::size_t grid_n = 128;
  std::size_t elements = 12;
  std::size_t scene_n = 64;
  std::size_t kernel_k = 11;
  std::size_t batch = 4;
};

struct StepTiming {
  BenchMode mode = BenchMode::dko;
  BenchSizes sizes;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::size_t iterations_timed = 0;
  double loss = 0.0;  // loss value of the timed step, for determinism checks
};

/// Forward + backward of a plain L-channel convolution layer (direct loops).
inline double electronic_step(const std::vector<RealMatrix>& scenes, const std::vector<RealMatrix>& kernels,
                              std::vector<RealMatrix>& kernel_grads) {
  double loss = 0.0;
  const std::size_t k = kernels.front().rows();
  for (auto& g : kernel_grads) g = RealMatrix(k, k, 0.0);
  for (const auto& s : scenes) {
    SceneImage img{{s}};
    for (std::size_t l = 0; l < kernels.size(); ++l) {
      const FeatureMap f = electronic_conv(img, {SignedKernel{kernels[l], Color::mono, 1.0}});
      const RealMatrix& y = f.channels[0];
      for (double v : y) loss += 0.5 * v * v;
      // dL/dy = y; dL/dker(a,b) = Σ y(r,c)·s(r+k-1-a, c+k-1-b)
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) {
          double acc = 0.0;
          for (std::size_t r = 0; r < y.rows(); ++r) {
            const double* srow = &s(r + k - 1 - a, k - 1 - b);
            const double* yrow = &y(r, 0);
            for (std::size_t c = 0; c < y.cols(); ++c) acc += yrow[c] * srow[c];
          }
          kernel_grads[l](a, b) += acc;
        }
    }
  }
  return loss;
}

/// Wall-clock cost of one forward+backward step. dko: one loss+gradient
/// evaluation of a single metasurface; e2e: one batch step through every
/// element and the readout; electronic: the conv layer alone.
inline StepTiming time_step(BenchMode mode, const BenchSizes& sizes, std::size_t repeats,
                            std::uint64_t seed, std::size_t warmup = 1) {
  if (repeats < 3) throw ValidationError("time_step needs at least 3 timed repeats");
  StepTiming t;
  t.mode = mode;
  t.sizes = sizes;
  t.iterations_timed = repeats;
  std::function<double()> step;

  E2eConfig ecfg;
  ecfg.grid_n = sizes.grid_n;
  ecfg.elements = sizes.elements;
  ecfg.scene_n = sizes.scene_n;
  ecfg.kernel_k = sizes.kernel_k;
  ecfg.batch = sizes.batch;
  ecfg.samples = sizes.batch;
  ecfg.seed = seed;

  std::optional<DkoProblem> problem;
  std::optional<EmbeddedTarget> target;
  std::optional<PhaseProfile> phase;
  std::optional<E2eTrainer> trainer;
  std::optional<E2eModel> model;
  E2eDataset data;
  std::vector<const RealMatrix*> xs, ys;
  std::vector<RealMatrix> kernels, grads;

  switch (mode) {
    case BenchMode::dko: {
      problem.emplace(make_default_aperture(GridSpec::square(sizes.grid_n, 2.5e-6)), OpticalConfig{});
      RealMatrix g(sizes.kernel_k, sizes.kernel_k);
      const double c = static_cast<double>(sizes.kernel_k / 2);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t q = 0; q < g.cols(); ++q)
          g(r, q) = std::exp(-((r - c) * (r - c) + (q - c) * (q - c)) / 4.5);
      target = embed_target(g, problem->sensor());
      DkoConfig dc;
      dc.seed = seed;
      phase = initial_phase(*problem, dc, 0);
      step = [&] {
        const auto fw = problem->forward(*phase);
        const RealMatrix* hp = &fw.psf.values;
        const RealMatrix* tp = &target->values;
        const double gain = fit_shared_gain({&hp, 1}, {&tp, 1});
        return evaluate_at_gain(*problem, fw, *target, gain, true).loss;
      };
      break;
    }
    case BenchMode::e2e: {
      trainer.emplace(ecfg);
      model = trainer->initial_model();
      data = make_e2e_dataset(ecfg);
      for (std::size_t b = 0; b < sizes.batch; ++b) {
        xs.push_back(&data.scenes[b]);
        ys.push_back(&data.targets[b]);
      }
      step = [&] { return trainer->loss_and_grad(*model, xs, ys).loss; };
      break;
    }
    case BenchMode::electronic: {
      data = make_e2e_dataset(ecfg);
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> nd;
      for (std::size_t l = 0; l < ecfg.channels(); ++l) {
        RealMatrix k(sizes.kernel_k, sizes.kernel_k);
        for (auto& v : k) v = nd(rng);
        kernels.push_back(std::move(k));
      }
      grads.resize(kernels.size());
      step = [&] { return electronic_step(data.scenes, kernels, grads); };
      break;
    }
  }

  for (std::size_t i = 0; i < warmup; ++i) t.loss = step();
  std::vector<double> ms;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    t.loss = step();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const double n = static_cast<double>(ms.size());
  for (double v : ms) t.mean_ms += v / n;
  for (double v : ms) t.std_ms += (v - t.mean_ms) * (v - t.mean_ms) / n;
  t.std_ms = std::sqrt(t.std_ms);
  return t;
}

}  // namespace metaforge
