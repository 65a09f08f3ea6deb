#include "mfrs/lq.hpp"

#include <cmath>
#include <memory>

#include "mfrs/errors.hpp"
#include "mfrs/parallel.hpp"

namespace mfrs {

namespace {

// Precomputed per-(regime, piece) data of the Hamiltonian system.
struct HamData {
  Eigen::MatrixXd B, Bbar, D, Dbar, Nn, Nbar;
  Eigen::MatrixXd Rinv, Rsuminv;
  Eigen::VectorXd rr;  // r + rbar
  Eigen::MatrixXd sA, sAbar, sC, sCbar, sM, sMbar, sQ, sQbar;
  Eigen::VectorXd sq_sum;  // script q + script qbar
  Eigen::VectorXd bv, sigv, gamv;
  Eigen::MatrixXd kappaI_plus_sA;  // kappa I + script A
};

struct HamTable {
  Dims dims;
  double kappa = 0.0;
  std::vector<double> breakpoints;
  std::vector<std::vector<HamData>> data;  // [regime][piece]

  int piece_index(double s) const {
    int idx = 0;
    for (std::size_t p = 1; p < breakpoints.size(); ++p)
      if (s >= breakpoints[p]) idx = static_cast<int>(p);
    return idx;
  }
  const HamData& at(int regime, double s) const { return data[regime][piece_index(s)]; }
};

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& mat, Errc code, const char* name) {
  Eigen::LLT<Eigen::MatrixXd> llt(mat);
  if (llt.info() != Eigen::Success || lambda_min_sym(mat) <= 0.0)
    fail(code, std::string(name) + " is not positive definite");
  return llt.solve(Eigen::MatrixXd::Identity(mat.rows(), mat.cols()));
}

std::shared_ptr<HamTable> build_ham_table(const TransformedCoefficients& tc,
                                          const LQCoefficients& c, double kappa) {
  auto table = std::make_shared<HamTable>();
  table->dims = c.dims;
  table->kappa = kappa;
  table->breakpoints = c.breakpoints;
  table->data.resize(c.dims.m0);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(c.dims.n, c.dims.n);
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      const auto& t = tc.blocks[i][p];
      HamData h;
      h.B = blk.B;
      h.Bbar = blk.Bbar;
      h.D = blk.D;
      h.Dbar = blk.Dbar;
      h.Nn = blk.N;
      h.Nbar = blk.Nbar;
      h.Rinv = spd_inverse(blk.R, Errc::r_not_invertible, "R");
      h.Rsuminv = spd_inverse(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
      h.rr = blk.r + blk.rbar;
      h.sA = t.sA;
      h.sAbar = t.sAbar;
      h.sC = t.sC;
      h.sCbar = t.sCbar;
      h.sM = t.sM;
      h.sMbar = t.sMbar;
      h.sQ = t.sQ;
      h.sQbar = t.sQbar;
      h.sq_sum = t.sq + t.sqbar;
      h.bv = blk.b;
      h.sigv = blk.sigma;
      h.gamv = blk.gamma;
      h.kappaI_plus_sA = kappa * eye + t.sA;
      table->data[i].push_back(std::move(h));
    }
  }
  return table;
}

// Transformed optimal control from the backward variables: the pointwise part
// through R^{-1}, the conditional-mean part through (R+Rbar)^{-1}. The
// inhomogeneities r, rbar are deterministic per regime, so their centered
// part vanishes.
Eigen::MatrixXd opt_u(const HamData& h, const ThetaBlock& th, const JointMoments& jm) {
  Eigen::MatrixXd rho = th.Y * h.B + th.Z * h.D + th.Z0 * h.Nn;  // rows: B^T y + D^T z + N^T z0
  const Eigen::VectorXd rho_mean =
      h.B.transpose() * jm.y_mean + h.D.transpose() * jm.z_mean + h.Nn.transpose() * jm.z0_mean;
  const Eigen::VectorXd rho2_mean = (h.B + h.Bbar).transpose() * jm.y_mean +
                                    (h.D + h.Dbar).transpose() * jm.z_mean +
                                    (h.Nn + h.Nbar).transpose() * jm.z0_mean;
  Eigen::MatrixXd U = -(rho.rowwise() - rho_mean.transpose()) * h.Rinv;
  U.rowwise() -= (h.Rsuminv * (rho2_mean + h.rr)).transpose();
  return U;
}

FbsdeCallbacks::Fn make_drift(std::shared_ptr<HamTable> tab) {
  return [tab](const StepContext& ctx, const Eigen::MatrixXd& X, const ThetaBlock& th,
               const JointMoments& jm) {
    const HamData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = opt_u(h, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.sA.transpose();
    out.noalias() += U * h.B.transpose();
    out.rowwise() += (h.sAbar * jm.x_mean + h.Bbar * Um + h.bv).transpose();
    return out;
  };
}

FbsdeCallbacks::Fn make_diff_idio(std::shared_ptr<HamTable> tab) {
  return [tab](const StepContext& ctx, const Eigen::MatrixXd& X, const ThetaBlock& th,
               const JointMoments& jm) {
    const HamData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = opt_u(h, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.sC.transpose();
    out.noalias() += U * h.D.transpose();
    out.rowwise() += (h.sCbar * jm.x_mean + h.Dbar * Um + h.sigv).transpose();
    return out;
  };
}

FbsdeCallbacks::Fn make_diff_common(std::shared_ptr<HamTable> tab) {
  return [tab](const StepContext& ctx, const Eigen::MatrixXd& X, const ThetaBlock& th,
               const JointMoments& jm) {
    const HamData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = opt_u(h, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.sM.transpose();
    out.noalias() += U * h.Nn.transpose();
    out.rowwise() += (h.sMbar * jm.x_mean + h.Nbar * Um + h.gamv).transpose();
    return out;
  };
}

CtxDriverCallback make_adjoint_driver(std::shared_ptr<HamTable> tab) {
  return [tab](const StepContext& ctx, const Eigen::MatrixXd& X, const ThetaBlock& th,
               const JointMoments& jm) {
    const HamData& h = tab->at(ctx.regime, ctx.s);
    Eigen::MatrixXd out = X * h.sQ.transpose();
    out.noalias() += th.Y * h.kappaI_plus_sA;
    out.noalias() += th.Z * h.sC;
    out.noalias() += th.Z0 * h.sM;
    out.rowwise() += (h.sQbar * jm.x_mean + h.sAbar.transpose() * jm.y_mean +
                      h.sCbar.transpose() * jm.z_mean + h.sMbar.transpose() * jm.z0_mean +
                      h.sq_sum)
                         .transpose();
    return out;
  };
}

}  // namespace

ControlProcess ControlProcess::zero(const TimeGrid& grid, int scenarios, int particles, int m) {
  ControlProcess u;
  u.grid = grid;
  u.m = m;
  u.values.assign(scenarios, std::vector<Eigen::MatrixXd>(
                                 grid.nodes(), Eigen::MatrixXd::Zero(particles, m)));
  return u;
}

ControlProcess lin_comb(double a, const ControlProcess& u1, double b, const ControlProcess& u2) {
  if (!(u1.grid == u2.grid) || u1.values.size() != u2.values.size())
    fail(Errc::grid_mismatch, "control processes not on a common layout");
  ControlProcess out = u1;
  for (std::size_t sc = 0; sc < out.values.size(); ++sc)
    for (std::size_t k = 0; k < out.values[sc].size(); ++k)
      out.values[sc][k] = a * u1.values[sc][k] + b * u2.values[sc][k];
  return out;
}

double horizon_for_tail(const KappaBounds& kb, double kappa, double tail_tol, double t0) {
  if (!(kb.kappa_bar > kappa))
    fail(Errc::invalid_argument,
         "tail tolerance unreachable: kappa_bar <= kappa; supply an explicit horizon");
  if (!(tail_tol > 0.0 && tail_tol < 1.0))
    fail(Errc::invalid_argument, "tail tolerance must lie in (0, 1)");
  return t0 + std::log(1.0 / tail_tol) / (kb.kappa_bar - kappa);
}

FBSDEProblem assemble_control_hamiltonian(const TransformedCoefficients& tc,
                                          const LQCoefficients& c, double kappa) {
  auto tab = build_ham_table(tc, c, kappa);
  FBSDEProblem p;
  p.dims = c.dims;
  p.kappa = kappa;
  p.kappa_star = c.kappa_star;
  p.cb.drift = make_drift(tab);
  p.cb.diff_idio = make_diff_idio(tab);
  p.cb.diff_common = make_diff_common(tab);
  p.cb.driver = make_adjoint_driver(tab);
  return p;
}

Eigen::MatrixXd transformed_optimal_control(const LQCoefficients& c, double s, int regime,
                                            const ThetaBlock& theta, const JointMoments& law) {
  const auto& blk = c.at(regime, s);
  HamData h;
  h.B = blk.B;
  h.Bbar = blk.Bbar;
  h.D = blk.D;
  h.Dbar = blk.Dbar;
  h.Nn = blk.N;
  h.Nbar = blk.Nbar;
  h.Rinv = spd_inverse(blk.R, Errc::r_not_invertible, "R");
  h.Rsuminv = spd_inverse(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
  h.rr = blk.r + blk.rbar;
  return opt_u(h, theta, law);
}

ControlSolveResult solve_control_problem(const LQCoefficients& c, const Eigen::VectorXd& x_t,
                                         int initial_regime, const LQNumerics& numerics) {
  c.validate();
  if (x_t.size() != c.dims.n) fail(Errc::dimension_mismatch, "x_t must have length n");
  if (initial_regime < 0 || initial_regime >= c.dims.m0)
    fail(Errc::state_out_of_range, "initial regime out of range");
  if (numerics.gen.m0 != c.dims.m0)
    fail(Errc::dimension_mismatch, "generator regime count must match m0");

  ControlSolveResult res;
  res.pd = check_positive_definiteness(c);
  if (!res.pd.pass) fail(Errc::pd_violation, "(PD) fails: " + res.pd.first_failure);

  const TransformedCoefficients tc = eliminate_cross_terms(c);
  res.bounds = compute_kappa_bounds(tc, numerics.kappa, c.kappa_star);

  double T = numerics.T;
  if (std::isnan(T)) {
    T = horizon_for_tail(res.bounds, numerics.kappa, numerics.tail_tol, numerics.t0);
    const int steps = static_cast<int>(std::ceil((T - numerics.t0) / numerics.dt));
    T = numerics.t0 + steps * numerics.dt;
  }
  res.grid = TimeGrid(numerics.t0, T, numerics.dt);

  FBSDEProblem p = assemble_control_hamiltonian(tc, c, numerics.kappa);
  p.grid = res.grid;
  p.scenarios = numerics.scenarios;
  p.particles = numerics.particles;
  p.seed = numerics.seed;
  p.gen = numerics.gen;
  p.initial_regime = initial_regime;
  p.kappa_x = res.bounds.kappa_x;
  p.kappa_y = res.bounds.kappa_y;
  p.x_t = x_t;
  p.bsde.basis = numerics.basis;
  p.bsde.picard_inner = numerics.picard_inner;
  p.bsde.threads = numerics.threads;

  PicardOptions popts;
  popts.damping = numerics.damping;
  popts.tol = numerics.tol;
  popts.max_iters = numerics.max_iters;
  popts.threads = numerics.threads;

  res.fbsde = numerics.lambda_steps.size() >= 2
                  ? solve_fbsde_continuation(p, numerics.lambda_steps, popts)
                  : solve_fbsde_picard(p, popts);

  // control extraction: transformed optimum, then the inverse transformation
  const int S = numerics.scenarios;
  const int nodes = res.grid.nodes();
  res.u.grid = res.grid;
  res.u.m = c.dims.m;
  res.u.values.assign(S, std::vector<Eigen::MatrixXd>(nodes));
  ControlProcess u_trans = res.u;
  parallel_for(S, numerics.threads, [&](int sc) {
    for (int k = 0; k < nodes; ++k) {
      const auto& ens = res.fbsde.ensembles[sc];
      const double s = res.grid.node(k);
      const int regime = ens.regime.states[k];
      const ThetaBlock th = res.fbsde.theta_at(sc, k);
      JointMoments jm;
      jm.x_mean = ens.states[k].colwise().mean().transpose();
      jm.y_mean = th.Y.colwise().mean().transpose();
      jm.z_mean = th.Z.colwise().mean().transpose();
      jm.z0_mean = th.Z0.colwise().mean().transpose();
      u_trans.values[sc][k] = transformed_optimal_control(c, s, regime, th, jm);
      res.u.values[sc][k] =
          untransform_control(c, s, regime, ens.states[k], jm.x_mean, u_trans.values[sc][k]);
    }
  });

  res.cost = evaluate_cost(c, res.u, res.fbsde.ensembles, numerics.kappa);
  {
    // fresh un-blended adjoint pass along the final state; the pathwise
    // integration of that fit carries the scheme error the optimality
    // residual is meant to expose
    BsdeOptions bopts = p.bsde;
    bopts.store_values = false;
    bopts.threads = numerics.threads;
    BackwardSolution adj = solve_adjoint(c, res.fbsde.ensembles, numerics.kappa, bopts,
                                         &numerics.gen);
    res.stationarity = stationarity_residual_pathwise(c, u_trans, adj.fit,
                                                      res.fbsde.ensembles, numerics.gen,
                                                      numerics.kappa);
  }
  if (c.dims.n == 1 && c.dims.m == 1)
    res.gain_estimate = estimate_feedback_gain(res.u, res.fbsde.ensembles, numerics.kappa);
  return res;
}

std::vector<ParticleEnsemble> simulate_lq_state(const LQCoefficients& c,
                                                const ControlProcess& u,
                                                const Eigen::VectorXd& x_t, int initial_regime,
                                                const LQNumerics& numerics) {
  const int n = c.dims.n, d = c.dims.d, d0 = c.dims.d0;
  const int N = numerics.particles;
  const TimeGrid grid = u.grid;
  ForwardSpec fs;
  fs.grid = grid;
  fs.scenarios = numerics.scenarios;
  fs.particles = N;
  fs.seed = numerics.seed;
  fs.gen = numerics.gen;
  fs.initial_regime = initial_regime;

  std::vector<ParticleEnsemble> out(fs.scenarios);
  parallel_for(fs.scenarios, numerics.threads, [&](int sc) {
    ParticleEnsemble ens = make_scenario_scaffold(fs, sc);
    ens.idio_d = d;
    fill_common_noise(ens, fs, d0);
    const int steps = grid.steps();
    const double dt = grid.dt;
    const double sdt = std::sqrt(dt);
    ens.states.assign(steps + 1, Eigen::MatrixXd());
    ens.states[0] = x_t.transpose().replicate(N, 1);
    for (int k = 0; k < steps; ++k) {
      const Eigen::MatrixXd& X = ens.states[k];
      const int regime = ens.regime.states[k];
      const auto& blk = c.at(regime, grid.node(k));
      const Eigen::MatrixXd& U = u.values[sc][k];
      const Eigen::VectorXd xm = X.colwise().mean().transpose();
      const Eigen::VectorXd um = U.colwise().mean().transpose();

      Eigen::MatrixXd next = X;
      {
        Eigen::MatrixXd drift = X * blk.A.transpose();
        drift.noalias() += U * blk.B.transpose();
        drift.rowwise() += (blk.Abar * xm + blk.Bbar * um + blk.b).transpose();
        next.noalias() += dt * drift;
      }
      {
        Eigen::MatrixXd sig = X * blk.C.transpose();
        sig.noalias() += U * blk.D.transpose();
        sig.rowwise() += (blk.Cbar * xm + blk.Dbar * um + blk.sigma).transpose();
        const Eigen::MatrixXd dW = sdt * idiosyncratic_normals(fs.seed, sc, k, N, d);
        for (int col = 0; col < d; ++col)
          next.array() += sig.middleCols(col * n, n).array().colwise() * dW.col(col).array();
      }
      {
        Eigen::MatrixXd sig0 = X * blk.M.transpose();
        sig0.noalias() += U * blk.N.transpose();
        sig0.rowwise() += (blk.Mbar * xm + blk.Nbar * um + blk.gamma).transpose();
        for (int col = 0; col < d0; ++col)
          next.noalias() += sig0.middleCols(col * n, n) * ens.common.dW0(k, col);
      }
      if (!next.allFinite())
        fail(Errc::non_finite_state, "non-finite state at node " + std::to_string(k + 1));
      ens.states[k + 1] = std::move(next);
    }
    out[sc] = std::move(ens);
  });
  return out;
}

CostBreakdown evaluate_cost(const LQCoefficients& c, const ControlProcess& u,
                            const std::vector<ParticleEnsemble>& ensembles, double kappa) {
  if (ensembles.empty()) fail(Errc::invalid_argument, "evaluate_cost: no ensembles");
  if (!(u.grid == ensembles[0].grid)) fail(Errc::grid_mismatch, "control/state grid mismatch");
  const TimeGrid grid = u.grid;
  const int S = static_cast<int>(ensembles.size());
  const int nodes = grid.nodes();

  // per-scenario trapezoid integrals of the five component groups
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(S, 5);
  Eigen::VectorXd terminal_integrand = Eigen::VectorXd::Zero(S);
  for (int sc = 0; sc < S; ++sc) {
    const auto& ens = ensembles[sc];
    for (int k = 0; k < nodes; ++k) {
      const double s = grid.node(k);
      const auto& blk = c.at(ens.regime.states[k], s);
      const Eigen::MatrixXd& X = ens.states[k];
      const Eigen::MatrixXd& U = u.values[sc][k];
      const double N = static_cast<double>(X.rows());
      const Eigen::VectorXd xm = X.colwise().mean().transpose();
      const Eigen::VectorXd um = U.colwise().mean().transpose();

      double state_q = (X * blk.Q.transpose()).cwiseProduct(X).sum() / N;
      double control_q = (U * blk.R.transpose()).cwiseProduct(U).sum() / N;
      double cross = 2.0 * (X * blk.S.transpose()).cwiseProduct(U).sum() / N;
      double mf = xm.dot(blk.Qbar * xm) + 2.0 * um.dot(blk.Sbar * xm) + um.dot(blk.Rbar * um);
      double lin = 2.0 * (X * blk.q).mean() + 2.0 * (U * blk.r).mean() +
                   2.0 * blk.qbar.dot(xm) + 2.0 * blk.rbar.dot(um);

      const double w = std::exp(kappa * s) * (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * grid.dt;
      comp(sc, 0) += w * state_q;
      comp(sc, 1) += w * control_q;
      comp(sc, 2) += w * cross;
      comp(sc, 3) += w * mf;
      comp(sc, 4) += w * lin;
      if (k == nodes - 1)
        terminal_integrand(sc) =
            std::exp(kappa * s) * (state_q + control_q + cross + mf + lin);
    }
  }
  comp *= 0.5;
  terminal_integrand *= 0.5;

  CostBreakdown out;
  out.state_quadratic = comp.col(0).mean();
  out.control_quadratic = comp.col(1).mean();
  out.cross = comp.col(2).mean();
  out.mean_field_quadratic = comp.col(3).mean();
  out.linear = comp.col(4).mean();
  Eigen::VectorXd per_scenario = comp.rowwise().sum();
  out.total = out.state_quadratic + out.control_quadratic + out.cross +
              out.mean_field_quadratic + out.linear;
  if (S > 1) {
    const double mean = per_scenario.mean();
    out.std_error = std::sqrt((per_scenario.array() - mean).square().sum() /
                              static_cast<double>(S - 1) / static_cast<double>(S));
  }
  // truncation tail: decay factor of Cor 3.2 applied to the terminal integrand
  const KappaBounds kb = compute_kappa_bounds(eliminate_cross_terms(c), kappa, c.kappa_star);
  out.tail_bound = kb.kappa_bar > kappa
                       ? std::abs(terminal_integrand.mean()) / (kb.kappa_bar - kappa)
                       : std::numeric_limits<double>::infinity();
  return out;
}

LQCoefficients transformed_cost_view(const LQCoefficients& c) {
  const TransformedCoefficients tc = eliminate_cross_terms(c);
  LQCoefficients out = c;
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      auto& blk = out.blocks[i][p];
      const auto& t = tc.blocks[i][p];
      blk.A = t.sA;
      blk.Abar = t.sAbar;
      blk.C = t.sC;
      blk.Cbar = t.sCbar;
      blk.M = t.sM;
      blk.Mbar = t.sMbar;
      blk.Q = t.sQ;
      blk.Qbar = t.sQbar;
      blk.q = t.sq;
      blk.qbar = t.sqbar;
      blk.S.setZero();
      blk.Sbar.setZero();
    }
  }
  return out;
}

BackwardSolution solve_adjoint(const LQCoefficients& c,
                               const std::vector<ParticleEnsemble>& ensembles, double kappa,
                               const BsdeOptions& opts, const GeneratorMatrix* gen) {
  const TransformedCoefficients tc = eliminate_cross_terms(c);
  auto tab = build_ham_table(tc, c, kappa);
  GeneratorMatrix zero{c.dims.m0, Eigen::MatrixXd::Zero(c.dims.m0, c.dims.m0)};
  return solve_mkv_bsde_ctx(make_adjoint_driver(tab), ensembles, {}, gen ? *gen : zero, opts);
}

StationarityReport stationarity_residual_pathwise(const LQCoefficients& c,
                                                  const ControlProcess& u, const ThetaFit& fit,
                                                  const std::vector<ParticleEnsemble>& ensembles,
                                                  const GeneratorMatrix& gen, double kappa) {
  const TimeGrid grid = u.grid;
  const int S = static_cast<int>(ensembles.size());
  const int nodes = grid.nodes();
  const int steps = grid.steps();
  const int N = ensembles[0].particles();
  const int n = c.dims.n, d = c.dims.d;
  const double dt = grid.dt;
  const double sdt = std::sqrt(dt);
  const TransformedCoefficients tc = eliminate_cross_terms(c);
  auto tab = build_ham_table(tc, c, kappa);
  const CtxDriverCallback driver = make_adjoint_driver(tab);

  StationarityReport rep;
  rep.grid = grid;
  rep.node_norms.setZero(nodes);
  Eigen::VectorXd node_acc = Eigen::VectorXd::Zero(nodes);

  for (int sc = 0; sc < S; ++sc) {
    const auto& ens = ensembles[sc];
    Eigen::MatrixXd yhat = Eigen::MatrixXd::Zero(N, n);  // terminal condition
    for (int k = steps; k >= 0; --k) {
      const double s = grid.node(k);
      const int regime = ens.regime.states[k];
      MomentSummary ms = ens.moments(k);
      ThetaBlock th = fit.evaluate(k, regime, ens.states[k], ms.mean);
      if (k < steps) {
        // pathwise backward step with the fitted integrands and the
        // realized noise increments
        JointMoments jm;
        jm.x_mean = ms.mean;
        jm.y_mean = th.Y.colwise().mean().transpose();
        jm.z_mean = th.Z.colwise().mean().transpose();
        jm.z0_mean = th.Z0.colwise().mean().transpose();
        StepContext ctx{s, k, ens.scenario_id, regime};
        yhat += dt * driver(ctx, ens.states[k], th, jm);
        const Eigen::MatrixXd dW = sdt * idiosyncratic_normals(ens.root_seed, ens.scenario_id,
                                                               k, N, d);
        for (int col = 0; col < d; ++col)
          yhat.array() -=
              th.Z.middleCols(col * n, n).array().colwise() * dW.col(col).array();
        for (int col = 0; col < c.dims.d0; ++col)
          yhat.noalias() -= th.Z0.middleCols(col * n, n) * ens.common.dW0(k, col);
        for (int i = 0; i < gen.m0; ++i) {
          if (ens.regime.states[k] != i) continue;
          for (int j = 0; j < gen.m0; ++j) {
            if (i == j || gen.a(i, j) <= 0.0) continue;
            double count = 0.0;
            for (std::size_t jj = 0; jj < ens.regime.jump_times.size(); ++jj) {
              const double tj = ens.regime.jump_times[jj];
              if (tj > s && tj <= grid.node(k + 1) && ens.regime.jump_pairs[jj].first == i &&
                  ens.regime.jump_pairs[jj].second == j)
                count += 1.0;
            }
            const double dM = count - gen.a(i, j) * dt;
            yhat.rowwise() -= (dM * fit.coefK[k][i * gen.m0 + j]).transpose();
          }
        }
      }
      // optimality-condition residual with the pathwise Y
      const auto& blk = c.at(regime, s);
      const Eigen::MatrixXd& U = u.values[sc][k];
      const Eigen::VectorXd ym = yhat.colwise().mean().transpose();
      const Eigen::VectorXd zm = th.Z.colwise().mean().transpose();
      const Eigen::VectorXd z0m = th.Z0.colwise().mean().transpose();
      const Eigen::VectorXd um = U.colwise().mean().transpose();
      Eigen::MatrixXd res = yhat * blk.B + th.Z * blk.D + th.Z0 * blk.N + U * blk.R;
      res.rowwise() += (blk.Bbar.transpose() * ym + blk.Dbar.transpose() * zm +
                        blk.Nbar.transpose() * z0m + blk.Rbar * um + blk.r + blk.rbar)
                           .transpose();
      node_acc(k) += res.squaredNorm() / static_cast<double>(N);
    }
  }
  for (int k = 0; k < nodes; ++k)
    rep.node_norms(k) = std::sqrt(node_acc(k) / static_cast<double>(S));
  double integral = 0.0;
  for (int k = 0; k < nodes; ++k) {
    const double w = (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * grid.dt;
    integral += w * std::exp(kappa * grid.node(k)) * rep.node_norms(k) * rep.node_norms(k);
  }
  rep.weighted_norm = std::sqrt(integral);
  return rep;
}

namespace {

StationarityReport stationarity_core(
    const LQCoefficients& c, const ControlProcess& u, double kappa,
    const std::function<ThetaBlock(int sc, int node)>& theta_of,
    const std::vector<ParticleEnsemble>& ensembles) {
  const TimeGrid grid = u.grid;
  const int S = static_cast<int>(ensembles.size());
  const int nodes = grid.nodes();
  StationarityReport rep;
  rep.grid = grid;
  rep.node_norms.setZero(nodes);
  for (int k = 0; k < nodes; ++k) {
    double acc = 0.0;
    long count = 0;
    for (int sc = 0; sc < S; ++sc) {
      const auto& ens = ensembles[sc];
      const auto& blk = c.at(ens.regime.states[k], grid.node(k));
      const ThetaBlock th = theta_of(sc, k);
      const Eigen::MatrixXd& U = u.values[sc][k];
      const Eigen::VectorXd ym = th.Y.colwise().mean().transpose();
      const Eigen::VectorXd zm = th.Z.colwise().mean().transpose();
      const Eigen::VectorXd z0m = th.Z0.colwise().mean().transpose();
      const Eigen::VectorXd um = U.colwise().mean().transpose();

      Eigen::MatrixXd res = th.Y * blk.B + th.Z * blk.D + th.Z0 * blk.N + U * blk.R;
      res.rowwise() += (blk.Bbar.transpose() * ym + blk.Dbar.transpose() * zm +
                        blk.Nbar.transpose() * z0m + blk.Rbar * um + blk.r + blk.rbar)
                           .transpose();
      acc += res.squaredNorm();
      count += res.rows();
    }
    rep.node_norms(k) = std::sqrt(acc / static_cast<double>(count));
  }
  double integral = 0.0;
  for (int k = 0; k < nodes; ++k) {
    const double w = (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * grid.dt;
    integral += w * std::exp(kappa * grid.node(k)) * rep.node_norms(k) * rep.node_norms(k);
  }
  rep.weighted_norm = std::sqrt(integral);
  return rep;
}

}  // namespace

StationarityReport stationarity_residual(const LQCoefficients& c, const ControlProcess& u,
                                         const BackwardSolution& adjoint,
                                         const std::vector<ParticleEnsemble>& ensembles,
                                         double kappa) {
  if (!(u.grid == adjoint.grid)) fail(Errc::grid_mismatch, "control/adjoint grid mismatch");
  if (adjoint.Y.empty())
    fail(Errc::invalid_argument, "adjoint solution must carry per-particle values");
  return stationarity_core(
      c, u, kappa,
      [&](int sc, int k) {
        ThetaBlock th;
        th.Y = adjoint.Y[sc][k];
        th.Z = adjoint.Z[sc][k];
        th.Z0 = adjoint.Z0[sc][k];
        return th;
      },
      ensembles);
}

StationarityReport stationarity_residual(const LQCoefficients& c, const ControlProcess& u,
                                         const FBSDESolution& sol, double kappa) {
  if (!(u.grid == sol.grid)) fail(Errc::grid_mismatch, "control/solution grid mismatch");
  return stationarity_core(
      c, u, kappa, [&](int sc, int k) { return sol.theta_at(sc, k); }, sol.ensembles);
}

RiccatiSolution riccati_scalar_oracle(double a, double b, double c, double d, double m,
                                      double n_coef, double q, double r, double kappa) {
  if (!(r > 0.0)) fail(Errc::pd_violation, "control weight r must be positive");
  if (q < 0.0) fail(Errc::pd_violation, "state weight q must be nonnegative");
  const double bracket = kappa + 2.0 * a + c * c + m * m;
  const double beta = b + c * d + m * n_coef;
  const double delta = d * d + n_coef * n_coef;
  auto F = [&](double p) { return p * bracket - p * p * beta * beta / (r + p * delta) + q; };

  RiccatiSolution sol;
  if (q == 0.0) return sol;  // p = 0 solves the equation
  double hi = 1.0;
  while (F(hi) > 0.0) {
    hi *= 2.0;
    if (hi > 1e14) fail(Errc::no_psd_root, "no nonnegative stationary Riccati root");
  }
  double lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (F(mid) > 0.0 ? lo : hi) = mid;
  }
  sol.p = 0.5 * (lo + hi);
  sol.gain = sol.p * beta / (r + sol.p * delta);
  return sol;
}

double estimate_feedback_gain(const ControlProcess& u,
                              const std::vector<ParticleEnsemble>& ensembles, double kappa,
                              double burn_in_fraction) {
  const TimeGrid grid = u.grid;
  const int nodes = grid.nodes();
  const int k0 = static_cast<int>(std::ceil(burn_in_fraction * (nodes - 1)));
  double num = 0.0, den = 0.0;
  for (std::size_t sc = 0; sc < ensembles.size(); ++sc) {
    for (int k = k0; k < nodes; ++k) {
      const double w = std::exp(kappa * grid.node(k));
      num += w * u.values[sc][k].col(0).dot(ensembles[sc].states[k].col(0));
      den += w * ensembles[sc].states[k].col(0).squaredNorm();
    }
  }
  return den > 0.0 ? -num / den : std::numeric_limits<double>::quiet_NaN();
}

MonotonicityFunctionals control_monotonicity_functionals(const LQCoefficients& c) {
  MonotonicityFunctionals fn;
  const TheoremFunctionals tf = control_theorem_functionals(c);
  fn.beta1 = tf.beta1;
  fn.beta2 = 0.0;
  auto cc = std::make_shared<LQCoefficients>(c);
  fn.varphi = [cc](double s, const ThetaBlock& th, const ThetaBlock& thb,
                   const JointMoments& jm, const JointMoments& jmb, int regime) {
    const auto& blk = cc->at(regime, s);
    Eigen::MatrixXd drho =
        (th.Y - thb.Y) * blk.B + (th.Z - thb.Z) * blk.D + (th.Z0 - thb.Z0) * blk.N;
    const Eigen::VectorXd dm1 = blk.B.transpose() * (jm.y_mean - jmb.y_mean) +
                                blk.D.transpose() * (jm.z_mean - jmb.z_mean) +
                                blk.N.transpose() * (jm.z0_mean - jmb.z0_mean);
    const Eigen::VectorXd dm2 =
        (blk.B + blk.Bbar).transpose() * (jm.y_mean - jmb.y_mean) +
        (blk.D + blk.Dbar).transpose() * (jm.z_mean - jmb.z_mean) +
        (blk.N + blk.Nbar).transpose() * (jm.z0_mean - jmb.z0_mean);
    const double centered =
        (drho.rowwise() - dm1.transpose()).squaredNorm() / static_cast<double>(drho.rows());
    return centered + dm2.squaredNorm();
  };
  return fn;
}

}  // namespace mfrs
