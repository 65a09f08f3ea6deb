#include <doctest.h>

#include <cmath>

#include "mfrs/game.hpp"
#include "mfrs/measure.hpp"

using namespace mfrs;

namespace {

Eigen::MatrixXd scalar(double v) {
  Eigen::MatrixXd m(1, 1);
  m << v;
  return m;
}

LQBlocks base_blocks() {
  Dims dm;
  LQBlocks blk = LQBlocks::zero(dm);
  blk.A = scalar(-1.0);
  blk.B = scalar(1.0);
  blk.C = scalar(0.2);
  blk.D = scalar(0.1);
  blk.M = scalar(0.1);
  blk.N = scalar(0.05);
  blk.Q = scalar(0.5);
  blk.R = scalar(1.0);
  return blk;
}

// (S1)-(S3)-compliant game: bar blocks scale with k, no cross terms
GameCoefficients compliant_game(double k) {
  LQBlocks blk = base_blocks();
  blk.Bbar = scalar(k * 1.0);
  blk.Dbar = scalar(k * 0.1);
  blk.Nbar = scalar(k * 0.05);
  blk.Qbar = scalar(0.2);
  blk.Rbar = scalar(0.3);
  GameCoefficients g;
  g.base = LQCoefficients::constant(Dims{}, 1.0, {blk});
  g.S1bar = {{scalar(0.0)}};
  g.S2bar = {{scalar(0.0)}};
  g.k = k;
  return g;
}

GameCoefficients bars_zero_game() {
  GameCoefficients g;
  g.base = LQCoefficients::constant(Dims{}, 1.0, {base_blocks()});
  g.S1bar = {{scalar(0.0)}};
  g.S2bar = {{scalar(0.0)}};
  g.k = 0.0;
  return g;
}

LQNumerics game_numerics() {
  LQNumerics num;
  num.kappa = 0.0;
  num.dt = 0.02;
  num.particles = 128;
  num.scenarios = 8;
  num.seed = 777;
  num.tol = 1e-5;
  num.max_iters = 40;
  num.T = 5.0;
  num.gen = GeneratorMatrix{1, Eigen::MatrixXd::Zero(1, 1)};
  return num;
}

}  // namespace

TEST_SUITE_BEGIN("game");

TEST_CASE("profile projection basics") {
  TimeGrid grid(0.0, 1.0, 0.25);
  const int N = 4;
  ControlProcess u = ControlProcess::zero(grid, 1, N, 1);
  std::vector<ParticleEnsemble> ens(1);
  ens[0].grid = grid;
  ens[0].scenario_id = 0;
  ens[0].regime.grid = grid;
  ens[0].regime.states.assign(grid.nodes(), 0);
  ens[0].states.assign(grid.nodes(), Eigen::MatrixXd::Zero(N, 1));

  SUBCASE("deterministic clouds project to themselves") {
    for (int k = 0; k < grid.nodes(); ++k) {
      ens[0].states[k].setConstant(0.3 * k);
      u.values[0][k].setConstant(-0.1 * k);
    }
    PopulationProfile p = project_profile(u, ens);
    for (int k = 0; k < grid.nodes(); ++k) {
      CHECK(p.X[0](k, 0) == doctest::Approx(0.3 * k));
      CHECK(p.u[0](k, 0) == doctest::Approx(-0.1 * k));
    }
  }

  SUBCASE("antisymmetric clouds project to zero state") {
    for (int k = 0; k < grid.nodes(); ++k) {
      ens[0].states[k] << 1.0, -1.0, 2.5, -2.5;
      u.values[0][k] << 0.4, -0.4, 0.0, 0.0;
    }
    PopulationProfile p = project_profile(u, ens);
    for (int k = 0; k < grid.nodes(); ++k) {
      CHECK(p.X[0](k, 0) == 0.0);
      CHECK(p.u[0](k, 0) == 0.0);
    }
  }

  SUBCASE("generic clouds match the measure-module mean") {
    rng::Stream stream(rng::Key(5).child(rng::kUser, 0));
    for (int k = 0; k < grid.nodes(); ++k)
      for (int i = 0; i < N; ++i) ens[0].states[k](i, 0) = stream.normal();
    PopulationProfile p = project_profile(u, ens);
    for (int k = 0; k < grid.nodes(); ++k) {
      EmpiricalMeasure mu = EmpiricalMeasure::uniform(ens[0].states[k]);
      CHECK(p.X[0](k, 0) == doctest::Approx(conditional_mean(mu)(0)).epsilon(1e-14));
    }
  }
}

TEST_CASE("zero data with zero profile gives a zero best response") {
  GameCoefficients g = bars_zero_game();
  for (auto& per_regime : g.base.blocks)
    for (auto& blk : per_regime) {
      blk.A.setZero();
      blk.B.setZero();
      blk.C.setZero();
      blk.D.setZero();
      blk.M.setZero();
      blk.N.setZero();
      blk.Q.setZero();
    }
  LQNumerics num = game_numerics();
  num.T = 2.0;
  num.particles = 16;
  num.scenarios = 2;
  PopulationProfile profile = PopulationProfile::zero(TimeGrid(0.0, num.T, num.dt), 2, 1, 1);
  BestResponseResult br = best_response(g, profile, Eigen::VectorXd::Zero(1), 0, num);
  CHECK(br.fbsde.converged);
  for (const auto& per_scenario : br.u.values)
    for (const auto& blk : per_scenario) CHECK(blk.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("best response to the zero profile matches the bars-zero control optimum") {
  GameCoefficients g = bars_zero_game();
  LQNumerics num = game_numerics();
  PopulationProfile profile =
      PopulationProfile::zero(TimeGrid(0.0, num.T, num.dt), num.scenarios, 1, 1);
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  BestResponseResult br = best_response(g, profile, x0, 0, num);
  ControlSolveResult ctrl = solve_control_problem(g.base, x0, 0, num);
  REQUIRE(br.fbsde.converged);
  REQUIRE(ctrl.fbsde.converged);
  double worst = 0.0;
  for (int sc = 0; sc < num.scenarios; ++sc)
    for (int k = 0; k < br.u.grid.nodes(); ++k) {
      worst = std::max(worst,
                       (br.u.values[sc][k] - ctrl.u.values[sc][k]).cwiseAbs().maxCoeff());
      worst = std::max(worst, (br.fbsde.ensembles[sc].states[k] -
                               ctrl.fbsde.ensembles[sc].states[k]).cwiseAbs().maxCoeff());
    }
  CHECK(worst < 1e-9);  // identical noise, identical systems
}

TEST_CASE("equilibrium with zero bar blocks equals the control solution") {
  GameCoefficients g = bars_zero_game();
  LQNumerics num = game_numerics();
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  EquilibriumReport rep = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::direct);
  ControlSolveResult ctrl = solve_control_problem(g.base, x0, 0, num);
  REQUIRE(rep.converged);
  REQUIRE(ctrl.fbsde.converged);
  double dist = 0.0;
  const TimeGrid grid = rep.grid;
  for (int k = 0; k < grid.nodes(); ++k) {
    double node = 0.0;
    for (int sc = 0; sc < num.scenarios; ++sc)
      node += (rep.u.values[sc][k] - ctrl.u.values[sc][k]).squaredNorm() /
              static_cast<double>(num.particles);
    node /= num.scenarios;
    node *= std::exp(num.kappa * grid.node(k));
    dist += (k == 0 || k == grid.nodes() - 1 ? 0.5 : 1.0) * node * grid.dt;
  }
  CHECK(dist < 2.0 * num.tol);
}

TEST_CASE("direct and iterate modes agree on a compliant instance") {
  GameCoefficients g = compliant_game(0.5);
  REQUIRE(check_game_structure(g).pass);
  LQNumerics num = game_numerics();
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  EquilibriumReport direct = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::direct);
  EquilibriumReport iterate = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::iterate);
  REQUIRE(direct.converged);
  REQUIRE(iterate.converged);
  double dist = 0.0;
  const TimeGrid grid = direct.grid;
  for (int k = 0; k < grid.nodes(); ++k) {
    double node = 0.0;
    for (int sc = 0; sc < num.scenarios; ++sc)
      node += (direct.u.values[sc][k] - iterate.u.values[sc][k]).squaredNorm() /
              static_cast<double>(num.particles);
    node /= num.scenarios;
    node *= std::exp(num.kappa * grid.node(k));
    dist += (k == 0 || k == grid.nodes() - 1 ? 0.5 : 1.0) * node * grid.dt;
  }
  CHECK(dist < 3.0 * num.tol);
  CHECK(direct.consistency_gap < num.tol);
  CHECK(direct.fixed_point_gap < 3.0 * num.tol);
}

TEST_CASE("nash deviations never improve the equilibrium cost") {
  GameCoefficients g = compliant_game(0.5);
  LQNumerics num = game_numerics();
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  EquilibriumReport rep = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::direct);
  REQUIRE(rep.converged);
  NashDeviationTable table = nash_deviation_test(g, rep, x0, 0, num, 8, {0.1, 0.3}, 99);
  CHECK(table.all_pass);
  CHECK(table.rows.size() == 16);

  // negative control: a shifted control must lose against some deviation
  EquilibriumReport shifted = rep;
  for (auto& per_scenario : shifted.u.values)
    for (auto& blk : per_scenario) blk.array() += 0.5;
  NashDeviationTable bad = nash_deviation_test(g, shifted, x0, 0, num, 8, {0.1, 0.3}, 99);
  CHECK_FALSE(bad.all_pass);
}

TEST_CASE("final-remark case: k = 0 with equal cross profiles") {
  GameCoefficients g = bars_zero_game();
  g.base.blocks[0][0].Qbar = scalar(0.2);
  g.base.blocks[0][0].Rbar = scalar(0.3);
  g.S1bar = {{scalar(0.15)}};
  g.S2bar = {{scalar(0.15)}};
  g.k = 0.0;
  GameStructureReport st = check_game_structure(g);
  CHECK(st.pass);
  LQNumerics num = game_numerics();
  EquilibriumReport rep =
      solve_game_fixed_point(g, Eigen::VectorXd::Constant(1, 1.0), 0, num,
                             GameSolveMode::direct);
  CHECK(rep.converged);
}

TEST_CASE("game equilibrium is invariant to the generator with identical regimes") {
  LQBlocks blk = base_blocks();
  blk.Bbar = scalar(0.5);
  blk.Dbar = scalar(0.05);
  blk.Nbar = scalar(0.025);
  blk.Qbar = scalar(0.2);
  Dims dm;
  dm.m0 = 2;
  GameCoefficients g;
  g.base = LQCoefficients::constant(dm, 1.0, {blk, blk});
  g.S1bar = {{scalar(0.0)}, {scalar(0.0)}};
  g.S2bar = {{scalar(0.0)}, {scalar(0.0)}};
  g.k = 0.5;
  LQNumerics num = game_numerics();
  num.T = 3.0;
  num.particles = 64;
  num.basis.pool_regimes = true;
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, 1.0);
  Eigen::MatrixXd a1(2, 2), a2(2, 2);
  a1 << -0.5, 0.5, 0.7, -0.7;
  a2 << -1.5, 1.5, 0.2, -0.2;
  num.gen = validate_generator(a1);
  EquilibriumReport r1 = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::direct);
  num.gen = validate_generator(a2);
  EquilibriumReport r2 = solve_game_fixed_point(g, x0, 0, num, GameSolveMode::direct);
  double worst = 0.0;
  for (int sc = 0; sc < num.scenarios; ++sc)
    for (int k = 0; k < r1.grid.nodes(); ++k)
      worst = std::max(worst, (r1.u.values[sc][k] - r2.u.values[sc][k]).cwiseAbs().maxCoeff());
  CHECK(worst == 0.0);
}

TEST_CASE("solvability inequality chain holds on compliant instances") {
  // S = S1bar = S2bar = 0 instance: the tilde and blackboard blocks vanish
  GameCoefficients g = compliant_game(0.5);
  const double kappa = 0.0;
  FBSDEProblem p = assemble_game_hamiltonian(g, kappa);
  p.grid = TimeGrid(0.0, 5.0, 0.02);
  KappaBounds kb = compute_game_kappa_bounds(g, kappa, 1.0);
  p.kappa_x = kb.kappa_x;
  p.kappa_y = kb.kappa_y;
  MonotonicityFunctionals fn = game_monotonicity_functionals(g);
  DominationReport rep = verify_domination_monotonicity(p, fn, 300, 128, 901);
  CHECK(rep.pass);
  CHECK(rep.worst_monotonicity_margin > -1e-8);

  // nonzero cross terms chosen so the blackboard blocks still vanish:
  // S2bar = Rbar R^{-1} S and (k+1) S1bar = S2bar - k S
  LQBlocks blk = base_blocks();
  const double k = 0.5, S = 0.4, Rbar = 1.0;
  blk.S = scalar(S);
  blk.Rbar = scalar(Rbar);
  blk.Bbar = scalar(k * 1.0);
  blk.Dbar = scalar(k * 0.1);
  blk.Nbar = scalar(k * 0.05);
  blk.Q = scalar(1.0);
  GameCoefficients g2;
  g2.base = LQCoefficients::constant(Dims{}, 1.0, {blk});
  const double S2 = Rbar * S;              // Rbar R^{-1} S with R = 1
  const double S1 = (S2 - k * S) / (k + 1.0);
  g2.S1bar = {{scalar(S1)}};
  g2.S2bar = {{scalar(S2)}};
  g2.k = k;
  REQUIRE(check_game_structure(g2).pass);
  GameTransformedCoefficients tc = game_transformed_coefficients(g2);
  CHECK(std::abs(tc.blocks[0][0].bbA(0, 0)) < 1e-14);
  CHECK(std::abs(tc.blocks[0][0].tA(0, 0)) < 1e-14);

  FBSDEProblem p2 = assemble_game_hamiltonian(g2, kappa);
  p2.grid = p.grid;
  KappaBounds kb2 = compute_game_kappa_bounds(g2, kappa, 1.0);
  p2.kappa_x = kb2.kappa_x;
  p2.kappa_y = kb2.kappa_y;
  MonotonicityFunctionals fn2 = game_monotonicity_functionals(g2);
  DominationReport rep2 = verify_domination_monotonicity(p2, fn2, 300, 128, 902);
  CHECK(rep2.pass);
}

TEST_SUITE_END();
