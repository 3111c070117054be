#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "metaforge/adjoint.hpp"
#include "metaforge/eval.hpp"
#include "metaforge/tensorio.hpp"

namespace metaforge {

enum class OptimizerKind { gradient_descent, adam };
enum class InitKind { lens_jitter, random, zero };
enum class StopReason { converged, early_stop, max_iters };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "gradient-descent"; }
inline const char* to_string(InitKind k) {
  switch (k) {
    case InitKind::lens_jitter: return "lens+jitter";
    case InitKind::random: return "random";
    case InitKind::zero: return "zero";
  }
  return "?";
}
inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::converged: return "converged";
    case StopReason::early_stop: return "early_stop";
    case StopReason::max_iters: return "max_iters";
  }
  return "?";
}

struct DkoConfig {
  std::size_t max_iters = 2000;
  double lr = 0.02;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  InitKind init = InitKind::lens_jitter;
  double init_sigma_rad = 0.1;
  std::uint64_t seed = 0;
  double rel_tol = 1e-6;
  std::size_t patience = 50;
  bool fit_gain = true;
  // Where a phase snapshot is written if the loss turns non-finite; empty disables.
  std::filesystem::path snapshot_dir;

  void validate() const {
    if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be positive and finite");
    if (!(rel_tol >= 0.0)) throw ValidationError("rel_tol must be >= 0");
    if (!(init_sigma_rad >= 0.0)) throw ValidationError("init_sigma_rad must be >= 0");
    if (optimizer == OptimizerKind::adam &&
        !(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0))
      throw ValidationError("adam needs 0 <= beta < 1 and epsilon > 0");
  }
};

struct DkoResult {
  std::size_t element = 0;
  PhaseProfile phase;  // best iterate
  Psf realized_psf;    // PSF of `phase`, unnormalized
  double gain = 0.0;   // gain·psf ≈ target
  std::vector<double> loss_curve;  // this element's loss at every iterate
  double final_loss = 0.0;         // loss of the returned phase
  std::size_t iterations_run = 0;
  StopReason stop_reason = StopReason::max_iters;
  KernelMatchReport kernel_metrics;
};

/// Samples per side added around the footprint when scoring realized kernels.
inline std::size_t guard_samples(const EmbeddedTarget& t) { return 2 * t.samples_per_tap; }

/// The scoring window: target footprint plus a two-tap guard band, clipped to the sensor.
inline std::pair<std::size_t, std::size_t> metric_window(const EmbeddedTarget& t) {
  const std::size_t g = guard_samples(t);
  return {std::min(t.footprint.rows + 2 * g, t.values.rows()),
          std::min(t.footprint.cols + 2 * g, t.values.cols())};
}

/// Gain-compensated realized half-kernel vs its target on the scoring window.
inline KernelMatchReport half_kernel_metrics(const Psf& psf, double gain, const EmbeddedTarget& t) {
  const auto [wr, wc] = metric_window(t);
  RealMatrix realized = center_window(psf.values, wr, wc);
  for (auto& v : realized) v *= gain;
  return kernel_metrics(realized, center_window(t.values, wr, wc));
}

/// The composed signed kernel gain·(h+ − h−) vs (t+ − t−) on the scoring window.
inline KernelMatchReport signed_kernel_metrics(const Psf& psf_plus, const Psf& psf_minus, double gain,
                                               const EmbeddedTarget& t_plus, const EmbeddedTarget& t_minus) {
  const auto [wr, wc] = metric_window(t_plus);
  const RealMatrix hp = center_window(psf_plus.values, wr, wc);
  const RealMatrix hm = center_window(psf_minus.values, wr, wc);
  const RealMatrix tp = center_window(t_plus.values, wr, wc);
  const RealMatrix tm = center_window(t_minus.values, wr, wc);
  RealMatrix realized(wr, wc), target(wr, wc);
  for (std::size_t k = 0; k < realized.size(); ++k) {
    realized[k] = gain * (hp[k] - hm[k]);
    target[k] = tp[k] - tm[k];
  }
  return kernel_metrics(realized, target);
}

inline KernelMatchReport signed_kernel_metrics(const DkoResult& plus, const DkoResult& minus,
                                               const EmbeddedTarget& t_plus, const EmbeddedTarget& t_minus) {
  return signed_kernel_metrics(plus.realized_psf, minus.realized_psf, plus.gain, t_plus, t_minus);
}

/// Starting phase for one element, seeded by `seed ^ element`.
inline PhaseProfile initial_phase(const DkoProblem& problem, const DkoConfig& cfg, std::size_t element) {
  const GridSpec& g = problem.grid();
  std::mt19937_64 rng(cfg.seed ^ static_cast<std::uint64_t>(element));
  switch (cfg.init) {
    case InitKind::zero:
      return PhaseProfile::zeros(g);
    case InitKind::random: {
      std::normal_distribution<double> d(0.0, cfg.init_sigma_rad);
      RealMatrix v(g.n_y, g.n_x);
      for (auto& x : v) x = d(rng);
      return {g, std::move(v)};
    }
    case InitKind::lens_jitter: {
      PhaseProfile p = make_lens_phase(g, problem.optics(), problem.optics().sensor_distance_m);
      std::uniform_real_distribution<double> d(-cfg.init_sigma_rad, cfg.init_sigma_rad);
      for (auto& x : p.values) x += d(rng);
      return p;
    }
  }
  return PhaseProfile::zeros(g);
}

namespace detail {

class PhaseStepper {
 public:
  PhaseStepper(const DkoConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(RealMatrix& phase, const RealMatrix& grad) {
    ++t_;
    if (cfg_.optimizer == OptimizerKind::gradient_descent) {
      for (std::size_t k = 0; k < phase.size(); ++k) phase[k] -= cfg_.lr * grad[k];
      return;
    }
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < phase.size(); ++k) {
      const double g = grad[k];
      m_[k] = b1 * m_[k] + (1.0 - b1) * g;
      v_[k] = b2 * v_[k] + (1.0 - b2) * g * g;
      phase[k] -= cfg_.lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.epsilon);
    }
  }

 private:
  DkoConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

[[noreturn]] inline void abort_non_finite(const DkoConfig& cfg, std::size_t element, std::size_t iter,
                                          const PhaseProfile& phase) {
  std::string where = "no snapshot";
  if (!cfg.snapshot_dir.empty()) {
    const auto path = cfg.snapshot_dir / ("nonfinite_phase_" + std::to_string(element) + ".npy");
    try {
      io::save_matrix(phase.values, path);
      where = "phase snapshot " + path.string();
    } catch (const Error&) {
      where = "snapshot write failed";
    }
  }
  throw NumericError("non-finite DKO loss for element " + std::to_string(element) + " at iteration " +
                     std::to_string(iter) + " (" + where + ")");
}

}  // namespace detail

/// Optimizes the + and − metasurfaces of one signed kernel. The two phases
/// evolve independently; they share one fitted gain per iteration.
inline std::pair<DkoResult, DkoResult> optimize_kernel(
    const DkoProblem& problem, const EmbeddedTarget& t_plus, const EmbeddedTarget& t_minus,
    const DkoConfig& cfg, std::size_t plus_element = 0, std::size_t minus_element = 1,
    std::optional<std::pair<PhaseProfile, PhaseProfile>> init = std::nullopt) {
  cfg.validate();
  problem.check_target(t_plus);
  problem.check_target(t_minus);
  for (const auto* t : {&t_plus, &t_minus})
    for (double v : t->values)
      if (!(v >= 0.0)) throw ValidationError("DKO targets must be non-negative");

  const std::array<const EmbeddedTarget*, 2> targets{&t_plus, &t_minus};
  const std::array<std::size_t, 2> elements{plus_element, minus_element};
  std::array<PhaseProfile, 2> phase;
  if (init) {
    phase = {init->first, init->second};
  } else {
    phase = {initial_phase(problem, cfg, plus_element), initial_phase(problem, cfg, minus_element)};
  }
  const std::size_t n = problem.grid().n_x * problem.grid().n_y;
  std::array<detail::PhaseStepper, 2> stepper{detail::PhaseStepper(cfg, n), detail::PhaseStepper(cfg, n)};

  const double target_energy = sum_squares(t_plus.values) + sum_squares(t_minus.values);
  // Below this the pair is an exact fit; further steps would only add noise.
  const double converged_loss = 1e-24 * std::max(target_energy, 1e-300);

  std::array<DkoResult, 2> res;
  double best = std::numeric_limits<double>::infinity();
  double reference = best;
  std::size_t stall = 0;
  std::size_t it = 0;
  StopReason reason = StopReason::max_iters;
  for (;; ++it) {
    std::array<FresnelForward, 2> fw{problem.forward(phase[0]), problem.forward(phase[1])};
    const RealMatrix* hs[2] = {&fw[0].psf.values, &fw[1].psf.values};
    const RealMatrix* ts[2] = {&t_plus.values, &t_minus.values};
    const double gain = cfg.fit_gain ? fit_shared_gain(hs, ts) : 1.0;
    const bool last = it == cfg.max_iters;
    std::array<DkoEvaluation, 2> ev;
    for (int s = 0; s < 2; ++s) ev[s] = evaluate_at_gain(problem, fw[s], *targets[s], gain, !last);
    const double total = ev[0].loss + ev[1].loss;
    if (!std::isfinite(total)) {
      const int bad = std::isfinite(ev[0].loss) ? 1 : 0;
      detail::abort_non_finite(cfg, elements[bad], it, phase[bad]);
    }
    for (int s = 0; s < 2; ++s) res[s].loss_curve.push_back(ev[s].loss);

    if (total < best) {
      best = total;
      for (int s = 0; s < 2; ++s) {
        res[s].phase = phase[s];
        res[s].realized_psf = fw[s].psf;
        res[s].gain = gain;
        res[s].final_loss = ev[s].loss;
      }
    }
    if (last) break;
    if (total <= converged_loss) {
      reason = StopReason::converged;
      break;
    }
    if (best < reference * (1.0 - cfg.rel_tol) || it == 0) {
      reference = best;
      stall = 0;
    } else if (++stall >= cfg.patience) {
      reason = StopReason::early_stop;
      break;
    }
    for (int s = 0; s < 2; ++s) {
      stepper[s].step(phase[s].values, ev[s].gradient);
      if (!all_finite(phase[s].values)) detail::abort_non_finite(cfg, elements[s], it + 1, phase[s]);
    }
  }

  for (int s = 0; s < 2; ++s) {
    res[s].element = elements[s];
    res[s].iterations_run = it;
    res[s].stop_reason = reason;
    res[s].kernel_metrics = half_kernel_metrics(res[s].realized_psf, res[s].gain, *targets[s]);
  }
  return {std::move(res[0]), std::move(res[1])};
}

/// One signed kernel's pair of targets, tagged with their ArrayPlan indices.
struct LayerTarget {
  std::size_t plus_element = 0;
  std::size_t minus_element = 1;
  EmbeddedTarget plus;
  EmbeddedTarget minus;
};

struct LayerOutcome {
  std::optional<std::pair<DkoResult, DkoResult>> results;
  std::string error;  // non-empty when the subproblem aborted

  bool ok() const noexcept { return results.has_value(); }
};

/// Runs every pair on a pool of `parallelism` workers. Results are returned
/// in input order and do not depend on the worker count.
inline std::vector<LayerOutcome> optimize_layer(const DkoProblem& problem,
                                                const std::vector<LayerTarget>& targets,
                                                const DkoConfig& cfg, std::size_t parallelism = 1) {
  cfg.validate();
  std::vector<LayerOutcome> out(targets.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < targets.size();) {
      const auto& t = targets[i];
      try {
        out[i].results = optimize_kernel(problem, t.plus, t.minus, cfg, t.plus_element, t.minus_element);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, targets.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  return out;
}

}  // namespace metaforge
