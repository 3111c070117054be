#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "metaforge/adjoint.hpp"
#include "metaforge/dko.hpp"
#include "metaforge/kernels.hpp"
#include "oracles.hpp"

using namespace metaforge;

namespace {

const OpticalConfig kOptics{};

struct Instance {
  GridSpec grid;
  ApertureMask aperture;
  PhaseProfile phase;
  EmbeddedTarget target;
};

Instance random_instance(std::size_t n, std::uint64_t seed, std::size_t k = 5) {
  std::mt19937_64 rng(seed);
  const auto g = GridSpec::square(n, 2.5e-6);
  auto ap = make_default_aperture(g);
  PhaseProfile phase{g, oracle::random_real(n, n, rng, -3, 3)};
  auto target = embed_target(oracle::random_real(k, k, rng), sensor_grid(g, kOptics));
  return {g, std::move(ap), std::move(phase), std::move(target)};
}

long double oracle_loss(const Instance& in, const RealMatrix& phase, bool fit_gain = true) {
  return oracle::dko_loss(oracle::fresnel_psf_ld(oracle::modulation(phase, in.aperture.transmittance), in.grid.pitch_m,
                                                 kOptics.wavelength_m, kOptics.sensor_distance_m),
                          in.target.values, fit_gain);
}

EmbeddedTarget scaled_psf_target(const Psf& psf, double scale) {
  EmbeddedTarget t;
  t.sensor = psf.sensor;
  t.values = psf.values;
  for (auto& v : t.values) v *= scale;
  t.footprint = {0, 0, psf.values.rows(), psf.values.cols()};
  return t;
}

}  // namespace

// ---------------------------------------------------------------- loss

TEST(DkoLoss, ExactMatchRecoversGain) {
  const auto in = random_instance(16, 1);
  const auto psf = fresnel_psf(make_modulation(in.phase, in.aperture), kOptics);
  const auto r = dko_loss(in.phase, in.aperture, scaled_psf_target(psf, 3.7), kOptics, true);
  EXPECT_NEAR(r.gain, 3.7, 1e-12);
  EXPECT_LT(r.loss, 1e-24 * sum_squares(psf.values));
}

TEST(DkoLoss, ZeroTargetGivesZeroGain) {
  const auto in = random_instance(16, 2);
  const EmbeddedTarget t = scaled_psf_target(Psf{in.target.sensor, in.target.values}, 0.0);
  const auto r = dko_loss(in.phase, in.aperture, t, kOptics, true);
  EXPECT_EQ(r.gain, 0.0);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(DkoLoss, ClosedApertureIsDegenerateNotError) {
  const auto in = random_instance(16, 3);
  const auto closed = make_circular_aperture(in.grid, 0.0);
  const auto r = dko_loss(in.phase, closed, in.target, kOptics, true);
  EXPECT_EQ(r.gain, 0.0);
  EXPECT_DOUBLE_EQ(r.loss, sum_squares(in.target.values));
}

TEST(DkoLoss, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {4, 5}) {
    const auto in = random_instance(16, seed);
    for (bool fit : {true, false}) {
      const double lib = dko_loss(in.phase, in.aperture, in.target, kOptics, fit).loss;
      const double ref = static_cast<double>(oracle_loss(in, in.phase.values, fit));
      EXPECT_NEAR(lib, ref, 1e-12 * ref);
    }
  }
}

TEST(DkoLoss, GlobalPhaseInvariant) {
  const auto in = random_instance(16, 6);
  PhaseProfile shifted = in.phase;
  for (auto& v : shifted.values) v += 0.9;
  const double a = dko_loss(in.phase, in.aperture, in.target, kOptics, true).loss;
  const double b = dko_loss(shifted, in.aperture, in.target, kOptics, true).loss;
  EXPECT_NEAR(a, b, 1e-10 * a);
}

TEST(DkoLoss, TargetOffSensorGridIsShapeError) {
  const auto in = random_instance(16, 7);
  const auto t = embed_target(RealMatrix(3, 3, 1.0), SensorGrid{20, 20, 1e-6});
  EXPECT_THROW(dko_loss(in.phase, in.aperture, t, kOptics, true), ShapeError);
}

// ---------------------------------------------------------------- gradient

TEST(DkoGrad, VanishesAtExactFit) {
  const auto in = random_instance(16, 8);
  const auto psf = fresnel_psf(make_modulation(in.phase, in.aperture), kOptics);
  const auto g = dko_grad(in.phase, in.aperture, scaled_psf_target(psf, 2.0), kOptics, true);
  for (double v : g.values) EXPECT_LT(std::abs(v), 1e-10);
}

TEST(DkoGrad, MatchesLongDoubleFiniteDifferencesAtMicroradianStep) {
  for (std::uint64_t seed : {9, 10, 11}) {
    const auto in = random_instance(16, seed);
    const auto grad = dko_grad(in.phase, in.aperture, in.target, kOptics, true);
    double worst = 0.0;
    for (std::size_t idx : interior_probes(in.aperture, 20, seed)) {
      RealMatrix p = in.phase.values;
      p[idx] += 1e-6;
      const long double up = oracle_loss(in, p);
      p[idx] -= 2e-6;
      const long double dn = oracle_loss(in, p);
      const double fd = static_cast<double>((up - dn) / 2e-6L);
      worst = std::max(worst, std::abs(grad.values[idx] - fd) / std::max(std::abs(fd), std::abs(grad.values[idx])));
    }
    EXPECT_LT(worst, 1e-5) << seed;
  }
}

TEST(DkoGrad, FdCheckPassesInDoublePrecision) {
  for (std::uint64_t seed : {12, 13}) {
    const auto in = random_instance(16, seed);
    EXPECT_LT(fd_check(in.phase, in.aperture, in.target, kOptics, 20, 1e-4, true, seed), 1e-5);
    EXPECT_LT(fd_check(in.phase, in.aperture, in.target, kOptics, 20, 1e-4, false, seed), 1e-5);
  }
  const auto big = random_instance(32, 14, 7);
  EXPECT_LT(fd_check(big.phase, big.aperture, big.target, kOptics, 20, 1e-4, true, 14), 1e-5);
}

TEST(DkoGrad, FdCheckWithPaddingAndRectangularGrid) {
  std::mt19937_64 rng(15);
  const GridSpec g(12, 9, 2.5e-6);
  const auto ap = ApertureMask::open(g);
  const PhaseProfile phase{g, oracle::random_real(9, 12, rng, -3, 3)};
  const PropagationOptions opts{2};
  const auto t = embed_target(oracle::random_real(5, 5, rng), sensor_grid(g, kOptics, opts));
  EXPECT_LT(fd_check(phase, ap, t, kOptics, 20, 1e-4, true, 15, opts), 1e-5);
}

TEST(DkoGrad, ZeroOutsideAperture) {
  auto in = random_instance(24, 16);
  const auto ap = make_circular_aperture(in.grid, 0.6 * in.grid.extent_x());
  const auto g = dko_grad(in.phase, ap, in.target, kOptics, true);
  std::size_t nonzero_inside = 0;
  for (std::size_t k = 0; k < g.values.size(); ++k) {
    if (ap.transmittance[k] == 0.0) EXPECT_EQ(g.values[k], 0.0);
    else if (g.values[k] != 0.0) ++nonzero_inside;
  }
  EXPECT_GT(nonzero_inside, 0u);
}

TEST(DkoGrad, ScaleEquivariance) {
  const auto in = random_instance(16, 17);
  EmbeddedTarget scaled = in.target;
  const double c = 4.0;
  for (auto& v : scaled.values) v *= c;
  const auto r1 = dko_loss(in.phase, in.aperture, in.target, kOptics, true);
  const auto r2 = dko_loss(in.phase, in.aperture, scaled, kOptics, true);
  EXPECT_NEAR(r2.gain, c * r1.gain, 1e-12 * r2.gain);
  EXPECT_NEAR(r2.loss, c * c * r1.loss, 1e-12 * r2.loss);
  const auto g1 = dko_grad(in.phase, in.aperture, in.target, kOptics, true);
  const auto g2 = dko_grad(in.phase, in.aperture, scaled, kOptics, true);
  double gmax = 0.0;
  for (double v : g2.values) gmax = std::max(gmax, std::abs(v));
  for (std::size_t k = 0; k < g1.values.size(); ++k) EXPECT_NEAR(g2.values[k], c * c * g1.values[k], 1e-12 * gmax);
}

TEST(FdCompare, LinearSurrogateIsExact) {
  std::mt19937_64 rng(18);
  const auto g = GridSpec::square(8, 1e-6);
  const RealMatrix coeff = oracle::random_real(8, 8, rng, -2, 2);
  const PhaseProfile phase{g, oracle::random_real(8, 8, rng)};
  const auto loss = [&](const PhaseProfile& p) { return dot(coeff, p.values); };
  std::vector<std::size_t> probes(64);
  for (std::size_t i = 0; i < 64; ++i) probes[i] = i;
  EXPECT_LT(fd_compare(loss, phase, coeff, probes, 1e-3), 1e-10);
  EXPECT_THROW(fd_compare(loss, phase, coeff, probes, 0.0), ValidationError);
}

TEST(FdCheck, ErrorGrowsWithStepInTruncationRegime) {
  const auto in = random_instance(16, 19);
  const double e1 = fd_check(in.phase, in.aperture, in.target, kOptics, 20, 1e-3, true, 19);
  const double e2 = fd_check(in.phase, in.aperture, in.target, kOptics, 20, 3e-3, true, 19);
  const double e3 = fd_check(in.phase, in.aperture, in.target, kOptics, 20, 1e-2, true, 19);
  EXPECT_LT(e1, e2);
  EXPECT_LT(e2, e3);
}

TEST(FitSharedGain, ClampsNegativeToZero) {
  const RealMatrix h(2, 2, 1.0), t(2, 2, -1.0);
  const RealMatrix* hs[1] = {&h};
  const RealMatrix* ts[1] = {&t};
  EXPECT_EQ(fit_shared_gain(hs, ts), 0.0);
}

// ---------------------------------------------------------------- optimizer

namespace {

struct DeskSetup {
  DkoProblem problem;
  DkoConfig cfg;
  DeskSetup(std::size_t n = 128) : problem(make_default_aperture(GridSpec::square(n, 2.5e-6)), kOptics) {}

  std::pair<EmbeddedTarget, EmbeddedTarget> targets(const RealMatrix& k) const {
    const auto h = split_signed({k, Color::mono, 1.0});
    return {embed_target(h.plus, problem.sensor()), embed_target(h.minus, problem.sensor())};
  }
};

}  // namespace

TEST(OptimizeKernel, FixedPointStopsImmediately) {
  DeskSetup d(32);
  std::mt19937_64 rng(20);
  const PhaseProfile p1{d.problem.grid(), oracle::random_real(32, 32, rng, -3, 3)};
  const PhaseProfile p2{d.problem.grid(), oracle::random_real(32, 32, rng, -3, 3)};
  const auto t1 = scaled_psf_target(d.problem.forward(p1).psf, 1.0);
  const auto t2 = scaled_psf_target(d.problem.forward(p2).psf, 1.0);
  const auto [a, b] = optimize_kernel(d.problem, t1, t2, d.cfg, 0, 1, std::pair{p1, p2});
  EXPECT_EQ(a.loss_curve.front(), 0.0);
  EXPECT_EQ(a.iterations_run, 0u);
  EXPECT_EQ(a.stop_reason, StopReason::converged);
  EXPECT_EQ(a.phase.values, p1.values);
  EXPECT_EQ(b.phase.values, p2.values);
  EXPECT_EQ(a.gain, 1.0);
}

TEST(OptimizeKernel, GaussianDeskRegression) {
  DeskSetup d;
  const auto [tp, tm] = d.targets(oracle::gaussian_kernel(11, 1.5));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  EXPECT_LE(a.iterations_run, 2000u);
  EXPECT_GE(a.kernel_metrics.ncc, 0.98);
  double best = a.loss_curve[0] + b.loss_curve[0];
  for (std::size_t i = 1; i < a.loss_curve.size(); ++i) best = std::min(best, a.loss_curve[i] + b.loss_curve[i]);
  EXPECT_EQ(a.final_loss + b.final_loss, best);
}

TEST(OptimizeKernel, DeltaFocusesWithin200Iterations) {
  DeskSetup d;
  d.cfg.max_iters = 200;
  const auto [tp, tm] = d.targets(oracle::delta_kernel(11));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  EXPECT_LE(a.iterations_run, 200u);
  EXPECT_GE(a.kernel_metrics.ncc, 0.99);
  EXPECT_FALSE(b.kernel_metrics.ncc_defined());  // empty negative half
}

TEST(OptimizeKernel, RunningMinimumNonIncreasingAndBestReturned) {
  DeskSetup d(48);
  d.cfg.max_iters = 150;
  d.cfg.lr = 0.2;  // large enough that the raw curve oscillates
  std::mt19937_64 rng(21);
  const auto [tp, tm] = d.targets(oracle::smooth_signed_kernel(7, rng));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  std::vector<double> total(a.loss_curve.size());
  for (std::size_t i = 0; i < total.size(); ++i) total[i] = a.loss_curve[i] + b.loss_curve[i];
  double run = total[0];
  for (double v : total) {
    const double next = std::min(run, v);
    EXPECT_LE(next, run);
    run = next;
  }
  EXPECT_EQ(a.final_loss + b.final_loss, *std::min_element(total.begin(), total.end()));
  EXPECT_EQ(a.loss_curve.size(), a.iterations_run + 1);
}

TEST(OptimizeKernel, EarlyStopRecordsReason) {
  DeskSetup d(32);
  d.cfg.patience = 3;
  d.cfg.rel_tol = 0.5;  // almost no step counts as progress
  const auto [tp, tm] = d.targets(oracle::gaussian_kernel(5, 1.0));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  EXPECT_EQ(a.stop_reason, StopReason::early_stop);
  EXPECT_LT(a.iterations_run, 20u);
}

TEST(OptimizeKernel, MaxItersReason) {
  DeskSetup d(32);
  d.cfg.max_iters = 5;
  const auto [tp, tm] = d.targets(oracle::gaussian_kernel(5, 1.0));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  EXPECT_EQ(a.stop_reason, StopReason::max_iters);
  EXPECT_EQ(a.iterations_run, 5u);
  EXPECT_EQ(a.loss_curve.size(), 6u);
}

TEST(OptimizeKernel, GradientDescentAlsoReducesLoss) {
  DeskSetup d(32);
  d.cfg.optimizer = OptimizerKind::gradient_descent;
  d.cfg.lr = 1.0;
  d.cfg.max_iters = 50;
  const auto [tp, tm] = d.targets(oracle::gaussian_kernel(5, 1.0));
  const auto [a, b] = optimize_kernel(d.problem, tp, tm, d.cfg);
  EXPECT_LT(a.final_loss + b.final_loss, a.loss_curve.front() + b.loss_curve.front());
}

TEST(OptimizeKernel, OverflowingLossAbortsWithDiagnostic) {
  DeskSetup d(16);
  const auto dir = std::filesystem::temp_directory_path() / "metaforge_test_nonfinite";
  std::filesystem::remove_all(dir);
  d.cfg.snapshot_dir = dir;
  const auto [tp, tm] = d.targets(oracle::gaussian_kernel(5, 1.0));
  EmbeddedTarget huge = tp;
  for (auto& v : huge.values) v *= 1e200;
  try {
    optimize_kernel(d.problem, huge, tm, d.cfg, 4, 5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("element 4"), std::string::npos) << msg;
    EXPECT_TRUE(std::filesystem::exists(dir / "nonfinite_phase_4.npy"));
  }
}

TEST(OptimizeKernel, RejectsNegativeTargetsAndBadConfig) {
  DeskSetup d(16);
  auto [tp, tm] = d.targets(oracle::gaussian_kernel(5, 1.0));
  EmbeddedTarget bad = tp;
  bad.values[0] = -1.0;
  EXPECT_THROW(optimize_kernel(d.problem, bad, tm, d.cfg), ValidationError);
  d.cfg.max_iters = 0;
  EXPECT_THROW(optimize_kernel(d.problem, tp, tm, d.cfg), ValidationError);
}

TEST(InitialPhase, SeededPerElement) {
  DeskSetup d(16);
  const auto a = initial_phase(d.problem, d.cfg, 3), b = initial_phase(d.problem, d.cfg, 3);
  const auto c = initial_phase(d.problem, d.cfg, 4);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  const auto lens = make_lens_phase(d.problem.grid(), kOptics, kOptics.sensor_distance_m);
  for (std::size_t k = 0; k < a.values.size(); ++k) EXPECT_LE(std::abs(a.values[k] - lens.values[k]), 0.1);
}

// ---------------------------------------------------------------- layer driver

namespace {

std::vector<LayerTarget> small_layer(const DkoProblem& problem, std::size_t kernels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerTarget> out;
  for (std::size_t i = 0; i < kernels; ++i) {
    const auto h = split_signed({oracle::smooth_signed_kernel(5, rng), Color::mono, 1.0});
    out.push_back({2 * i, 2 * i + 1, embed_target(h.plus, problem.sensor()), embed_target(h.minus, problem.sensor())});
  }
  return out;
}

}  // namespace

TEST(OptimizeLayer, ParallelismDoesNotChangeResults) {
  DeskSetup d(24);
  d.cfg.max_iters = 40;
  const auto targets = small_layer(d.problem, 3, 22);
  const auto serial = optimize_layer(d.problem, targets, d.cfg, 1);
  const auto parallel = optimize_layer(d.problem, targets, d.cfg, 2);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ASSERT_TRUE(serial[i].ok() && parallel[i].ok());
    EXPECT_EQ(serial[i].results->first.loss_curve, parallel[i].results->first.loss_curve);
    EXPECT_EQ(serial[i].results->second.phase.values, parallel[i].results->second.phase.values);
  }
}

TEST(OptimizeLayer, PermutationInvariant) {
  DeskSetup d(24);
  d.cfg.max_iters = 30;
  const auto targets = small_layer(d.problem, 3, 23);
  auto permuted = targets;
  std::swap(permuted[0], permuted[2]);
  const auto a = optimize_layer(d.problem, targets, d.cfg, 1);
  const auto b = optimize_layer(d.problem, permuted, d.cfg, 3);
  EXPECT_EQ(a[0].results->first.loss_curve, b[2].results->first.loss_curve);
  EXPECT_EQ(a[2].results->second.loss_curve, b[0].results->second.loss_curve);
  EXPECT_EQ(a[1].results->first.phase.values, b[1].results->first.phase.values);
}

TEST(OptimizeLayer, FailuresAreIsolated) {
  DeskSetup d(24);
  d.cfg.max_iters = 10;
  auto targets = small_layer(d.problem, 3, 24);
  const auto alone = optimize_kernel(d.problem, targets[2].plus, targets[2].minus, d.cfg, 4, 5);
  targets[1].plus.values[0] = std::nan("");
  const auto out = optimize_layer(d.problem, targets, d.cfg, 2);
  EXPECT_TRUE(out[0].ok());
  EXPECT_FALSE(out[1].ok());
  EXPECT_FALSE(out[1].error.empty());
  ASSERT_TRUE(out[2].ok());
  EXPECT_EQ(out[2].results->first.loss_curve, alone.first.loss_curve);
}

TEST(Metrics, WindowHasTwoTapGuard) {
  const auto t = embed_target(RealMatrix(11, 11, 1.0), SensorGrid{128, 128, 1e-6}, 1);
  EXPECT_EQ(metric_window(t), (std::pair<std::size_t, std::size_t>{15, 15}));
  const auto t2 = embed_target(RealMatrix(11, 11, 1.0), SensorGrid{128, 128, 1e-6}, 2);
  EXPECT_EQ(metric_window(t2), (std::pair<std::size_t, std::size_t>{30, 30}));
}
