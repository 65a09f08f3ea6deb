#include <doctest.h>

#include <cmath>

#include "mfrs/backward.hpp"

using namespace mfrs;

namespace {

ForwardSpec ou_spec(double T, double dt, int scenarios, int particles, std::uint64_t seed) {
  ForwardSpec fs;
  fs.grid = TimeGrid(0.0, T, dt);
  fs.scenarios = scenarios;
  fs.particles = particles;
  fs.seed = seed;
  return fs;
}

std::vector<ParticleEnsemble> ou_ensembles(const ForwardSpec& fs, double a = -1.0,
                                           double sigma = 0.4, double sigma0 = 0.2) {
  CoefficientCallbacks cb;
  cb.n = cb.d = cb.d0 = 1;
  cb.drift = [a](double, const Eigen::MatrixXd& X, const MomentSummary&, int) {
    return Eigen::MatrixXd(a * X);
  };
  cb.diffusion_idio = [sigma](double, const Eigen::MatrixXd& X, const MomentSummary&, int) {
    return Eigen::MatrixXd(Eigen::MatrixXd::Constant(X.rows(), 1, sigma));
  };
  cb.diffusion_common = [sigma0](double, const Eigen::MatrixXd& X, const MomentSummary&, int) {
    return Eigen::MatrixXd(Eigen::MatrixXd::Constant(X.rows(), 1, sigma0));
  };
  Eigen::MatrixXd x0(1, 1);
  x0 << 1.0;
  return simulate_conditional_mkv_sde(cb, x0, fs);
}

GeneratorMatrix zero_gen() { return GeneratorMatrix{1, Eigen::MatrixXd::Zero(1, 1)}; }

}  // namespace

TEST_SUITE_BEGIN("backward");

TEST_CASE("zero driver and zero terminal give the zero solution") {
  ForwardSpec fs = ou_spec(1.0, 0.05, 2, 16, 3);
  auto ens = ou_ensembles(fs);
  BackwardSolution sol = solve_mkv_bsde({}, ens, {}, zero_gen());
  for (int sc = 0; sc < 2; ++sc)
    for (std::size_t k = 0; k < sol.Y[sc].size(); ++k) {
      CHECK(sol.Y[sc][k].cwiseAbs().maxCoeff() == 0.0);
      CHECK(sol.Z[sc][k].cwiseAbs().maxCoeff() == 0.0);
      CHECK(sol.Z0[sc][k].cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("deterministic driver reproduces the left-endpoint quadrature") {
  const double T = 2.0, dt = 0.01;
  ForwardSpec fs = ou_spec(T, dt, 2, 32, 5);
  auto ens = ou_ensembles(fs);
  auto g = [](double s) { return std::cos(1.3 * s) + 0.4; };
  DriverCallback driver = [&](double s, const Eigen::MatrixXd& X, const ThetaBlock&,
                              const JointMoments&, int) {
    return Eigen::MatrixXd(Eigen::MatrixXd::Constant(X.rows(), 1, g(s)));
  };
  BackwardSolution sol = solve_mkv_bsde(driver, ens, {}, zero_gen());
  const int steps = fs.grid.steps();
  for (int probe : {0, steps / 3, steps / 2, 2 * steps / 3}) {
    double oracle = 0.0;
    for (int j = probe; j < steps; ++j) oracle += g(fs.grid.node(j)) * dt;
    CHECK(sol.Y[0][probe](0, 0) == doctest::Approx(oracle).epsilon(1e-10));
    CHECK(sol.Y[1][probe](5, 0) == doctest::Approx(oracle).epsilon(1e-10));
  }
}

TEST_CASE("linear driver matches the exponential-kernel oracle") {
  const double T = 3.0, dt = 0.01, c = -1.0;
  ForwardSpec fs = ou_spec(T, dt, 2, 32, 7);
  auto ens = ou_ensembles(fs);
  auto g = [](double s) { return 1.0 + 0.5 * std::sin(s); };
  DriverCallback driver = [&](double s, const Eigen::MatrixXd& X, const ThetaBlock& th,
                              const JointMoments&, int) {
    return Eigen::MatrixXd(c * th.Y + Eigen::MatrixXd::Constant(X.rows(), 1, g(s)));
  };
  BackwardSolution sol = solve_mkv_bsde(driver, ens, {}, zero_gen());
  const int steps = fs.grid.steps();
  for (int probe : {0, steps / 4, steps / 2}) {
    const double s0 = fs.grid.node(probe);
    double oracle = 0.0;
    const int fine = 4000;
    const double h = (T - s0) / fine;
    for (int j = 0; j <= fine; ++j) {
      const double r = s0 + j * h;
      const double w = (j == 0 || j == fine) ? 0.5 : 1.0;
      oracle += w * h * std::exp(c * (r - s0)) * g(r);
    }
    CHECK(std::abs(sol.Y[0][probe](0, 0) - oracle) < 1e-2);
  }
}

TEST_CASE("solutions superpose for linear drivers") {
  // fixed linear structure L(x, theta), inhomogeneities and terminal values
  // superpose: the solution map is affine in (g, xi)
  const double T = 1.0, dt = 0.02;
  ForwardSpec fs = ou_spec(T, dt, 2, 64, 9);
  auto ens = ou_ensembles(fs);
  // the theta-linear structure is shared; the X loading and the running
  // inhomogeneity are exogenous data, so they add across problems
  auto theta_part = [](const ThetaBlock& th) {
    return Eigen::MatrixXd(-0.8 * th.Y + 0.2 * th.Z);
  };
  DriverCallback f1 = [&](double, const Eigen::MatrixXd& X, const ThetaBlock& th,
                          const JointMoments&, int) {
    return Eigen::MatrixXd(theta_part(th) + 0.5 * X +
                           Eigen::MatrixXd::Constant(X.rows(), 1, 0.7));
  };
  DriverCallback f2 = [&](double s, const Eigen::MatrixXd& X, const ThetaBlock& th,
                          const JointMoments&, int) {
    return Eigen::MatrixXd(theta_part(th) - 0.3 * X +
                           Eigen::MatrixXd::Constant(X.rows(), 1, std::sin(s)));
  };
  DriverCallback f12 = [&](double s, const Eigen::MatrixXd& X, const ThetaBlock& th,
                           const JointMoments&, int) {
    return Eigen::MatrixXd(theta_part(th) + 0.2 * X +
                           Eigen::MatrixXd::Constant(X.rows(), 1, 0.7 + std::sin(s)));
  };
  std::vector<Eigen::MatrixXd> xi1, xi2, xi12;
  for (const auto& e : ens) {
    xi1.push_back(e.states.back());
    xi2.push_back(Eigen::MatrixXd(2.0 * e.states.back()));
    xi12.push_back(Eigen::MatrixXd(3.0 * e.states.back()));
  }
  BackwardSolution s1 = solve_mkv_bsde(f1, ens, xi1, zero_gen());
  BackwardSolution s2 = solve_mkv_bsde(f2, ens, xi2, zero_gen());
  BackwardSolution s12 = solve_mkv_bsde(f12, ens, xi12, zero_gen());
  double worst = 0.0;
  for (int sc = 0; sc < 2; ++sc)
    for (std::size_t k = 0; k < s1.Y[sc].size(); ++k) {
      worst = std::max(worst,
                       (s1.Y[sc][k] + s2.Y[sc][k] - s12.Y[sc][k]).cwiseAbs().maxCoeff());
      worst = std::max(worst,
                       (s1.Z[sc][k] + s2.Z[sc][k] - s12.Z[sc][k]).cwiseAbs().maxCoeff());
    }
  CHECK(worst < 1e-8);
}

TEST_CASE("discrete martingale increments have conditional mean zero") {
  // fit on one batch, test the increments on fresh noise so the in-sample
  // covariation of the fits with their own regressors cannot bias the check
  const double T = 1.0, dt = 0.02;
  ForwardSpec fs = ou_spec(T, dt, 16, 256, 11);
  auto ens = ou_ensembles(fs);
  std::vector<Eigen::MatrixXd> terminal;
  for (const auto& e : ens)
    terminal.push_back(Eigen::MatrixXd(e.states.back().array().square().matrix()));
  BackwardSolution sol = solve_mkv_bsde({}, ens, terminal, zero_gen());

  ForwardSpec fresh = fs;
  fresh.seed = 1211;
  auto ens2 = ou_ensembles(fresh);

  const int steps = fs.grid.steps();
  const double sdt = std::sqrt(dt);
  const int S = fs.scenarios;
  Eigen::VectorXd per_scenario(S);
  for (int sc = 0; sc < S; ++sc) {
    double acc = 0.0;
    long count = 0;
    for (int k = 0; k < steps; ++k) {
      MomentSummary ms0 = ens2[sc].moments(k);
      MomentSummary ms1 = ens2[sc].moments(k + 1);
      ThetaBlock th0 = sol.fit.evaluate(k, 0, ens2[sc].states[k], ms0.mean);
      ThetaBlock th1 = sol.fit.evaluate(k + 1, 0, ens2[sc].states[k + 1], ms1.mean);
      const Eigen::MatrixXd dW =
          sdt * idiosyncratic_normals(fresh.seed, sc, k, fresh.particles, 1);
      const double dW0 = ens2[sc].common.dW0(k, 0);
      Eigen::MatrixXd inc = th1.Y - th0.Y;
      inc -= th0.Z.cwiseProduct(dW);
      inc -= th0.Z0 * dW0;
      acc += inc.sum();
      count += inc.rows();
    }
    per_scenario(sc) = acc / static_cast<double>(count);
  }
  const double mean = per_scenario.mean();
  const double se = std::sqrt((per_scenario.array() - mean).square().sum() /
                              static_cast<double>(S - 1) / static_cast<double>(S));
  CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("k loadings vanish without jumps and react to regime terminal data") {
  Eigen::MatrixXd a(2, 2);
  a << -0.5, 0.5, 0.8, -0.8;
  GeneratorMatrix gen{2, a};
  ForwardSpec fs = ou_spec(2.0, 0.05, 16, 64, 13);
  fs.gen = gen;
  auto ens = ou_ensembles(fs);

  // regime-independent data: no-jump steps carry exactly zero loadings
  std::vector<Eigen::MatrixXd> terminal;
  for (const auto& e : ens) terminal.push_back(e.states.back());
  BackwardSolution sol = solve_mkv_bsde({}, ens, terminal, gen);
  for (int k = 0; k < fs.grid.steps(); ++k) {
    bool jump01 = false, jump10 = false;
    for (const auto& e : ens) {
      for (std::size_t j = 0; j < e.regime.jump_times.size(); ++j) {
        const double tj = e.regime.jump_times[j];
        if (tj > fs.grid.node(k) && tj <= fs.grid.node(k + 1)) {
          if (e.regime.jump_pairs[j].first == 0) jump01 = true;
          if (e.regime.jump_pairs[j].first == 1) jump10 = true;
        }
      }
    }
    if (!jump01) CHECK(sol.K[k][0 * 2 + 1].cwiseAbs().maxCoeff() == 0.0);
    if (!jump10) CHECK(sol.K[k][1 * 2 + 0].cwiseAbs().maxCoeff() == 0.0);
  }

  // regime-dependent terminal value: loadings of observed jumps activate
  std::vector<Eigen::MatrixXd> indicator;
  for (const auto& e : ens)
    indicator.push_back(Eigen::MatrixXd(
        Eigen::MatrixXd::Constant(fs.particles, 1, e.regime.states.back() == 1 ? 1.0 : 0.0)));
  BackwardSolution sol2 = solve_mkv_bsde({}, ens, indicator, gen);
  double max_loading = 0.0;
  for (int k = 0; k < fs.grid.steps(); ++k)
    max_loading = std::max({max_loading, sol2.K[k][1].cwiseAbs().maxCoeff(),
                            sol2.K[k][2].cwiseAbs().maxCoeff()});
  CHECK(max_loading > 0.1);
}

TEST_CASE("transversality table decays and is horizon-insensitive") {
  const double kappa = -0.5, c = -1.0, dt = 0.02;
  std::vector<BackwardSolution> sols;
  DriverCallback driver = [c](double, const Eigen::MatrixXd& X, const ThetaBlock& th,
                              const JointMoments&, int) {
    return Eigen::MatrixXd(c * th.Y + Eigen::MatrixXd::Constant(X.rows(), 1, 1.0));
  };
  for (double T : {12.0, 16.0, 20.0}) {
    ForwardSpec fs = ou_spec(T, dt, 2, 32, 17);
    auto ens = ou_ensembles(fs);
    sols.push_back(solve_mkv_bsde(driver, ens, {}, zero_gen()));
  }
  // probes well inside the shortest horizon, where the solution has
  // converged in T; near the truncation boundary it is genuinely sensitive
  TransversalityTable table = transversality_check(sols, kappa, {2.0, 4.0, 6.0});
  for (int h = 0; h < 3; ++h)
    for (int p = 0; p + 1 < 3; ++p) CHECK(table.values(h, p) > table.values(h, p + 1));
  for (int p = 0; p < 3; ++p) {
    const double v0 = table.values(0, p);
    for (int h = 1; h < 3; ++h) CHECK(std::abs(table.values(h, p) - v0) / v0 < 0.05);
  }
}

TEST_CASE("transversality flags growth when kappa is too large") {
  const double dt = 0.02;
  DriverCallback driver = [](double, const Eigen::MatrixXd& X, const ThetaBlock& th,
                             const JointMoments&, int) {
    return Eigen::MatrixXd(0.3 * th.Y + Eigen::MatrixXd::Constant(X.rows(), 1, 1.0));
  };
  ForwardSpec fs = ou_spec(10.0, dt, 2, 32, 19);
  auto ens = ou_ensembles(fs);
  std::vector<BackwardSolution> sols{solve_mkv_bsde(driver, ens, {}, zero_gen())};
  TransversalityTable table = transversality_check(sols, 2.0, {2.0, 4.0, 6.0});
  CHECK(table.values(0, 2) > table.values(0, 0));
}

TEST_CASE("single-particle clouds downgrade the basis instead of failing") {
  ForwardSpec fs = ou_spec(0.5, 0.05, 2, 1, 23);
  auto ens = ou_ensembles(fs);
  std::vector<Eigen::MatrixXd> terminal;
  for (const auto& e : ens) terminal.push_back(e.states.back());
  BackwardSolution sol = solve_mkv_bsde({}, ens, terminal, zero_gen());
  CHECK(sol.diagnostics.basis_downgraded);
  CHECK(sol.Y[0][0].allFinite());
}

TEST_SUITE_END();
