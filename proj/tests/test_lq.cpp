#include <doctest.h>

#include <cmath>

#include "mfrs/errors.hpp"
#include "mfrs/lq.hpp"

using namespace mfrs;

namespace {

Eigen::MatrixXd scalar(double v) {
  Eigen::MatrixXd m(1, 1);
  m << v;
  return m;
}

LQBlocks scalar_blocks(double A, double B, double C, double D, double M, double N, double Q,
                       double S, double R) {
  Dims dm;
  LQBlocks blk = LQBlocks::zero(dm);
  blk.A = scalar(A);
  blk.B = scalar(B);
  blk.C = scalar(C);
  blk.D = scalar(D);
  blk.M = scalar(M);
  blk.N = scalar(N);
  blk.Q = scalar(Q);
  blk.S = scalar(S);
  blk.R = scalar(R);
  return blk;
}

GeneratorMatrix one_state_gen() { return GeneratorMatrix{1, Eigen::MatrixXd::Zero(1, 1)}; }

// scalar benchmark without mean-field or cross terms, inside the window
LQCoefficients riccati_benchmark() {
  LQBlocks blk = scalar_blocks(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 0.0, 1.0);
  return LQCoefficients::constant(Dims{}, 1.0, {blk});
}

LQNumerics fast_numerics(double kappa = 0.0) {
  LQNumerics num;
  num.kappa = kappa;
  num.dt = 0.02;
  num.particles = 256;
  num.scenarios = 16;
  num.seed = 2024;
  num.tol = 1e-6;
  num.max_iters = 40;
  num.gen = one_state_gen();
  return num;
}

ControlProcess random_control(const TimeGrid& grid, int scenarios, int particles, int m,
                              std::uint64_t seed, double scale = 0.5) {
  ControlProcess u = ControlProcess::zero(grid, scenarios, particles, m);
  for (int sc = 0; sc < scenarios; ++sc) {
    rng::Key key = rng::Key(seed).child(rng::kUser, sc);
    for (int k = 0; k < grid.nodes(); ++k)
      for (int c = 0; c < m; ++c)
        u.values[sc][k].col(c).setConstant(
            scale * rng::normal(key, static_cast<std::uint64_t>(k) * m + c));
  }
  return u;
}

}  // namespace

TEST_SUITE_BEGIN("lq");

TEST_CASE("riccati oracle hand cases") {
  // q = 0 gives p = 0, gain 0
  RiccatiSolution sol = riccati_scalar_oracle(-1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -0.5);
  CHECK(sol.p == 0.0);
  CHECK(sol.gain == 0.0);

  // no control channels: p solves (kappa + 2a + c^2 + m^2) p + q = 0
  const double a = -1.5, cdif = 0.3, mdif = 0.2, q = 0.7, kappa = -0.2;
  sol = riccati_scalar_oracle(a, 0.0, cdif, 0.0, mdif, 0.0, q, 1.0, kappa);
  const double bracket = kappa + 2.0 * a + cdif * cdif + mdif * mdif;
  CHECK(sol.p == doctest::Approx(-q / bracket).epsilon(1e-10));
  CHECK(sol.gain == 0.0);

  // generic instance: verify the residual of the defining equation
  sol = riccati_scalar_oracle(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 1.0, 0.0);
  const double beta = 1.0 + 0.2 * 0.1 + 0.15 * 0.05;
  const double delta = 0.1 * 0.1 + 0.05 * 0.05;
  const double br = 0.0 + 2.0 * (-1.0) + 0.04 + 0.0225;
  const double F = sol.p * br - sol.p * sol.p * beta * beta / (1.0 + sol.p * delta) + 0.5;
  CHECK(std::abs(F) < 1e-9);
  CHECK(sol.gain == doctest::Approx(sol.p * beta / (1.0 + sol.p * delta)));

  // unstabilizable: positive bracket and no control
  CHECK_THROWS_AS(riccati_scalar_oracle(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0), Error);
}

TEST_CASE("zero data solves to zero control and zero cost") {
  LQBlocks blk = scalar_blocks(-0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  LQNumerics num = fast_numerics();
  num.T = 2.0;
  num.particles = 32;
  num.scenarios = 4;
  ControlSolveResult res = solve_control_problem(c, Eigen::VectorXd::Zero(1), 0, num);
  CHECK(res.fbsde.converged);
  CHECK(std::abs(res.cost.total) < 1e-12);
  for (const auto& per_scenario : res.u.values)
    for (const auto& blk_u : per_scenario) CHECK(blk_u.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hamiltonian callbacks match the hand-expanded scalar form") {
  // scalar, no mean field, no cross terms:
  //   f = Q x + (kappa + A) y + C z + M z0 + q
  //   drift = A x - B R^{-1} (B y + D z + N z0 + r) + b
  LQBlocks blk = scalar_blocks(-1.0, 0.8, 0.3, 0.2, 0.25, 0.1, 0.6, 0.0, 2.0);
  blk.b = Eigen::VectorXd::Constant(1, 0.15);
  blk.q = Eigen::VectorXd::Constant(1, 0.05);
  blk.r = Eigen::VectorXd::Constant(1, -0.1);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  const double kappa = -0.3;
  FBSDEProblem p = assemble_control_hamiltonian(eliminate_cross_terms(c), c, kappa);

  const int N = 5;
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(N, 1);
  ThetaBlock th{Eigen::MatrixXd::Random(N, 1), Eigen::MatrixXd::Random(N, 1),
                Eigen::MatrixXd::Random(N, 1)};
  JointMoments jm;
  jm.x_mean = X.colwise().mean().transpose();
  jm.y_mean = th.Y.colwise().mean().transpose();
  jm.z_mean = th.Z.colwise().mean().transpose();
  jm.z0_mean = th.Z0.colwise().mean().transpose();
  StepContext ctx{0.5, 0, 0, 0};

  const Eigen::MatrixXd f = p.cb.driver(ctx, X, th, jm);
  const Eigen::MatrixXd b = p.cb.drift(ctx, X, th, jm);
  const Eigen::MatrixXd sig = p.cb.diff_idio(ctx, X, th, jm);
  for (int i = 0; i < N; ++i) {
    const double x = X(i, 0), y = th.Y(i, 0), z = th.Z(i, 0), z0 = th.Z0(i, 0);
    CHECK(f(i, 0) == doctest::Approx(0.6 * x + (kappa - 1.0) * y + 0.3 * z + 0.25 * z0 + 0.05)
                         .epsilon(1e-12));
    const double u = -(0.8 * y + 0.2 * z + 0.1 * z0 + (-0.1)) / 2.0;
    CHECK(b(i, 0) == doctest::Approx(-1.0 * x + 0.8 * u + 0.15).epsilon(1e-12));
    CHECK(sig(i, 0) == doctest::Approx(0.3 * x + 0.2 * u).epsilon(1e-12));
  }
}

TEST_CASE("solver gain matches the riccati oracle") {
  LQCoefficients c = riccati_benchmark();
  LQNumerics num = fast_numerics();
  num.particles = 384;
  num.scenarios = 24;
  ControlSolveResult res = solve_control_problem(c, Eigen::VectorXd::Constant(1, 1.0), 0, num);
  REQUIRE(res.fbsde.converged);
  CHECK(res.bounds.window_ok);
  RiccatiSolution oracle =
      riccati_scalar_oracle(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 1.0, num.kappa);
  CHECK(res.gain_estimate == doctest::Approx(oracle.gain).epsilon(0.05));
}

TEST_CASE("cost evaluation hand integral") {
  // deterministic X = e^{-s}: Q = 1, everything else zero, kappa = 0:
  // J = 1/2 int_0^T e^{-2s} ds
  LQBlocks blk = scalar_blocks(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  const double T = 10.0;
  LQNumerics num = fast_numerics();
  num.T = T;
  num.dt = 0.001;
  num.particles = 2;
  num.scenarios = 1;
  ControlProcess u = ControlProcess::zero(TimeGrid(0.0, T, num.dt), 1, 2, 1);
  auto ens = simulate_lq_state(c, u, Eigen::VectorXd::Constant(1, 1.0), 0, num);
  CostBreakdown cost = evaluate_cost(c, u, ens, 0.0);
  CHECK(cost.total == doctest::Approx(0.25 * (1.0 - std::exp(-20.0))).epsilon(2e-3));
  CHECK(cost.state_quadratic == doctest::Approx(cost.total));
  CHECK(cost.control_quadratic == 0.0);
  const double sum = cost.state_quadratic + cost.control_quadratic + cost.cross +
                     cost.mean_field_quadratic + cost.linear;
  CHECK(std::abs(sum - cost.total) < 1e-10);
}

TEST_CASE("optimality under random perturbations") {
  LQCoefficients c = riccati_benchmark();
  LQNumerics num = fast_numerics();
  num.particles = 128;
  num.scenarios = 16;
  ControlSolveResult res = solve_control_problem(c, Eigen::VectorXd::Constant(1, 1.0), 0, num);
  REQUIRE(res.fbsde.converged);
  const CostBreakdown at_opt = evaluate_cost(c, res.u, res.fbsde.ensembles, num.kappa);
  for (int trial = 0; trial < 12; ++trial) {
    ControlProcess v =
        random_control(res.grid, num.scenarios, num.particles, 1, 900 + trial);
    for (double eps : {0.1, 0.3}) {
      ControlProcess u_dev = lin_comb(1.0, res.u, eps, v);
      auto ens = simulate_lq_state(c, u_dev, Eigen::VectorXd::Constant(1, 1.0), 0, num);
      const CostBreakdown dev = evaluate_cost(c, u_dev, ens, num.kappa);
      CHECK(at_opt.total <=
            dev.total + 2.0 * std::sqrt(dev.std_error * dev.std_error +
                                        at_opt.std_error * at_opt.std_error));
    }
  }
}

TEST_CASE("cost is midpoint convex under pd") {
  LQCoefficients c = riccati_benchmark();
  LQNumerics num = fast_numerics();
  num.T = 4.0;
  num.particles = 64;
  num.scenarios = 8;
  const TimeGrid grid(0.0, num.T, num.dt);
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    ControlProcess u1 = random_control(grid, num.scenarios, num.particles, 1, 100 + trial);
    ControlProcess u2 = random_control(grid, num.scenarios, num.particles, 1, 500 + trial);
    ControlProcess mid = lin_comb(0.5, u1, 0.5, u2);
    const double j1 = evaluate_cost(c, u1, simulate_lq_state(c, u1, x0, 0, num), 0.0).total;
    const double j2 = evaluate_cost(c, u2, simulate_lq_state(c, u2, x0, 0, num), 0.0).total;
    CostBreakdown jm = evaluate_cost(c, mid, simulate_lq_state(c, mid, x0, 0, num), 0.0);
    CHECK(jm.total <= 0.5 * j1 + 0.5 * j2 + 3.0 * jm.std_error);
  }
}

TEST_CASE("transformed cost equals the original cost pathwise") {
  // S != 0 instance: evaluate J(u) and the script-cost of the transformed
  // control on the same state paths; within-scenario averaging makes the
  // identity exact up to rounding
  LQBlocks blk = scalar_blocks(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 0.3, 1.0);
  blk.Qbar = scalar(0.2);
  blk.Sbar = scalar(-0.1);
  blk.Rbar = scalar(0.4);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  LQNumerics num = fast_numerics();
  num.T = 3.0;
  num.particles = 64;
  num.scenarios = 8;
  const TimeGrid grid(0.0, num.T, num.dt);
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  const LQCoefficients view = transformed_cost_view(c);
  for (int trial = 0; trial < 20; ++trial) {
    ControlProcess u = random_control(grid, num.scenarios, num.particles, 1, 700 + trial);
    auto ens = simulate_lq_state(c, u, x0, 0, num);
    ControlProcess ut = u;
    for (int sc = 0; sc < num.scenarios; ++sc)
      for (int k = 0; k < grid.nodes(); ++k) {
        const Eigen::VectorXd xm = ens[sc].states[k].colwise().mean().transpose();
        ut.values[sc][k] = transform_control(c, grid.node(k), ens[sc].regime.states[k],
                                             ens[sc].states[k], xm, u.values[sc][k]);
      }
    const double j = evaluate_cost(c, u, ens, 0.0).total;
    const double jt = evaluate_cost(view, ut, ens, 0.0).total;
    CHECK(j == doctest::Approx(jt).epsilon(1e-10));
  }
}

TEST_CASE("cross-term twin problems produce the same control") {
  LQBlocks blk = scalar_blocks(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 0.3, 1.0);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  const LQCoefficients twin = transformed_cost_view(c);
  LQNumerics num = fast_numerics();
  num.particles = 128;
  num.scenarios = 8;
  num.T = 4.0;
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  ControlSolveResult res_s = solve_control_problem(c, x0, 0, num);
  ControlSolveResult res_0 = solve_control_problem(twin, x0, 0, num);
  REQUIRE(res_s.fbsde.converged);
  REQUIRE(res_0.fbsde.converged);
  // identical noise and identical transformed systems: the untransformed
  // control of the S-problem equals the twin's control after untransforming
  double worst = 0.0;
  for (int sc = 0; sc < num.scenarios; ++sc)
    for (int k = 0; k < res_s.grid.nodes(); ++k) {
      const Eigen::VectorXd xm = res_s.fbsde.ensembles[sc].states[k].colwise().mean().transpose();
      const Eigen::MatrixXd untrans = untransform_control(
          c, res_s.grid.node(k), res_s.fbsde.ensembles[sc].regime.states[k],
          res_s.fbsde.ensembles[sc].states[k], xm, res_0.u.values[sc][k]);
      worst = std::max(worst, (res_s.u.values[sc][k] - untrans).cwiseAbs().maxCoeff());
      worst = std::max(worst, (res_s.fbsde.ensembles[sc].states[k] -
                               res_0.fbsde.ensembles[sc].states[k]).cwiseAbs().maxCoeff());
    }
  CHECK(worst < 1e-8);
}

TEST_CASE("stationarity residual shrinks under refinement and responds to perturbations") {
  // idiosyncratic-only benchmark: the optimality residual is then dt/N
  // limited; the common channel carries its own scenario-count floor
  LQBlocks blk = scalar_blocks(-1.0, 1.0, 0.2, 0.1, 0.0, 0.0, 0.5, 0.0, 1.0);
  LQCoefficients c = LQCoefficients::constant(Dims{}, 1.0, {blk});
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);

  LQNumerics coarse = fast_numerics();
  coarse.dt = 0.04;
  coarse.particles = 64;
  coarse.scenarios = 8;
  coarse.T = 4.0;
  ControlSolveResult rc = solve_control_problem(c, x0, 0, coarse);
  REQUIRE(rc.fbsde.converged);

  LQNumerics fine = coarse;
  fine.dt = 0.02;
  fine.particles = 256;
  ControlSolveResult rf = solve_control_problem(c, x0, 0, fine);
  REQUIRE(rf.fbsde.converged);
  CHECK(rc.stationarity.weighted_norm / rf.stationarity.weighted_norm > 1.5);

  // residual grows roughly affinely in a control offset
  LQNumerics num = fine;
  ControlProcess v = random_control(rf.grid, num.scenarios, num.particles, 1, 4242, 1.0);
  std::vector<double> norms;
  for (double eps : {0.5, 1.0}) {
    ControlProcess u_dev = lin_comb(1.0, rf.u, eps, v);
    auto ens = simulate_lq_state(c, u_dev, x0, 0, num);
    BackwardSolution adj = solve_adjoint(c, ens, num.kappa);
    norms.push_back(stationarity_residual(c, u_dev, adj, ens, num.kappa).weighted_norm);
  }
  CHECK(norms[1] / norms[0] == doctest::Approx(2.0).epsilon(0.25));
}

TEST_CASE("results are invariant to the generator when regimes are identical") {
  LQBlocks blk = scalar_blocks(-1.0, 1.0, 0.2, 0.1, 0.15, 0.05, 0.5, 0.0, 1.0);
  Dims dm;
  dm.m0 = 2;
  LQCoefficients c = LQCoefficients::constant(dm, 1.0, {blk, blk});
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);

  LQNumerics slow = fast_numerics();
  slow.particles = 64;
  slow.scenarios = 8;
  slow.T = 3.0;
  slow.basis.pool_regimes = true;  // identical regimes: pooled regression
  Eigen::MatrixXd a1(2, 2), a2(2, 2);
  a1 << -0.5, 0.5, 0.7, -0.7;
  a2 << -2.0, 2.0, 0.3, -0.3;
  slow.gen = validate_generator(a1);
  ControlSolveResult r1 = solve_control_problem(c, x0, 0, slow);
  slow.gen = validate_generator(a2);
  ControlSolveResult r2 = solve_control_problem(c, x0, 0, slow);
  double worst = 0.0;
  for (int sc = 0; sc < slow.scenarios; ++sc)
    for (int k = 0; k < r1.grid.nodes(); ++k) {
      worst = std::max(worst, (r1.u.values[sc][k] - r2.u.values[sc][k]).cwiseAbs().maxCoeff());
      worst = std::max(worst, (r1.fbsde.ensembles[sc].states[k] -
                               r2.fbsde.ensembles[sc].states[k]).cwiseAbs().maxCoeff());
    }
  CHECK(worst == 0.0);  // bit-identical
}

TEST_CASE("domination-monotonicity verifier on the lq hamiltonian") {
  LQCoefficients c = riccati_benchmark();
  const double kappa = 0.0;
  FBSDEProblem p = assemble_control_hamiltonian(eliminate_cross_terms(c), c, kappa);
  p.grid = TimeGrid(0.0, 4.0, 0.02);
  KappaBounds kb = compute_kappa_bounds(eliminate_cross_terms(c), kappa, 1.0);
  p.kappa_x = kb.kappa_x;
  p.kappa_y = kb.kappa_y;
  MonotonicityFunctionals fn = control_monotonicity_functionals(c);
  DominationReport rep = verify_domination_monotonicity(p, fn, 200, 128, 77);
  CHECK(rep.pass);
  CHECK(rep.worst_monotonicity_margin > -1e-8);
  CHECK(rep.worst_domination_margin > -1e-8);

  // constructed violation: indefinite Q breaks the monotonicity inequality
  LQCoefficients bad = c;
  bad.blocks[0][0].Q = scalar(-0.5);
  FBSDEProblem pb = assemble_control_hamiltonian(eliminate_cross_terms(bad), bad, kappa);
  pb.grid = p.grid;
  KappaBounds kbb = compute_kappa_bounds(eliminate_cross_terms(bad), kappa, 1.0);
  pb.kappa_x = kbb.kappa_x;
  pb.kappa_y = kbb.kappa_y;
  MonotonicityFunctionals fnb = control_monotonicity_functionals(bad);
  DominationReport repb = verify_domination_monotonicity(pb, fnb, 200, 128, 77);
  CHECK(repb.monotonicity_violations > 0);
}

TEST_CASE("gateaux slope vanishes at the optimum") {
  LQCoefficients c = riccati_benchmark();
  LQNumerics num = fast_numerics();
  num.particles = 128;
  num.scenarios = 16;
  ControlSolveResult res = solve_control_problem(c, Eigen::VectorXd::Constant(1, 1.0), 0, num);
  REQUIRE(res.fbsde.converged);
  const double j0 = evaluate_cost(c, res.u, res.fbsde.ensembles, num.kappa).total;
  ControlProcess v = random_control(res.grid, num.scenarios, num.particles, 1, 31337);
  std::vector<double> slopes;
  for (double eps : {0.4, 0.2, 0.1}) {
    ControlProcess u_dev = lin_comb(1.0, res.u, eps, v);
    auto ens = simulate_lq_state(c, u_dev, Eigen::VectorXd::Constant(1, 1.0), 0, num);
    const double j = evaluate_cost(c, u_dev, ens, num.kappa).total;
    slopes.push_back((j - j0) / eps);
  }
  // quadratic cost: the difference quotient scales linearly in eps
  CHECK(slopes[1] == doctest::Approx(slopes[0] * 0.5).epsilon(0.2));
  CHECK(slopes[2] == doctest::Approx(slopes[0] * 0.25).epsilon(0.25));
}

TEST_SUITE_END();
