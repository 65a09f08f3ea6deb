#include "mfrs/game.hpp"

#include <cmath>
#include <memory>

#include "mfrs/errors.hpp"
#include "mfrs/parallel.hpp"

namespace mfrs {

namespace {

// Precomputed per-(regime, piece) data of the game systems.
struct GameData {
  Eigen::MatrixXd A, Abar, B, Bbar, C, Cbar, D, Dbar, M, Mbar, Nn, Nbar;
  Eigen::MatrixXd Q, Qbar, S, S1, S2, R, Rbar;
  Eigen::MatrixXd Rinv, Rsuminv;
  Eigen::VectorXd b, sigma, gamma, q, r, qbar, rbar;
  Eigen::MatrixXd sA, sC, sM, sQ;      // script blocks
  Eigen::MatrixXd kappaI_plus_sA;
  Eigen::MatrixXd SsumS1;              // S + S1bar
  Eigen::MatrixXd Qbar_eff;            // Qbar - S^T R^{-1} S1bar
  Eigen::MatrixXd U_eff;               // S2bar^T - S^T R^{-1} Rbar
  Eigen::VectorXd q_eff;               // q - S^T R^{-1} r
};

struct GameTable {
  Dims dims;
  double kappa = 0.0;
  std::vector<double> breakpoints;
  std::vector<std::vector<GameData>> data;

  int piece_index(double s) const {
    int idx = 0;
    for (std::size_t p = 1; p < breakpoints.size(); ++p)
      if (s >= breakpoints[p]) idx = static_cast<int>(p);
    return idx;
  }
  const GameData& at(int regime, double s) const { return data[regime][piece_index(s)]; }
};

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& mat, Errc code, const char* name) {
  Eigen::LLT<Eigen::MatrixXd> llt(mat);
  if (llt.info() != Eigen::Success || lambda_min_sym(mat) <= 0.0)
    fail(code, std::string(name) + " is not positive definite");
  return llt.solve(Eigen::MatrixXd::Identity(mat.rows(), mat.cols()));
}

std::shared_ptr<GameTable> build_game_table(const GameCoefficients& g, double kappa) {
  g.validate();
  const auto& c = g.base;
  auto tab = std::make_shared<GameTable>();
  tab->dims = c.dims;
  tab->kappa = kappa;
  tab->breakpoints = c.breakpoints;
  tab->data.resize(c.dims.m0);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(c.dims.n, c.dims.n);
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      GameData h;
      h.A = blk.A;
      h.Abar = blk.Abar;
      h.B = blk.B;
      h.Bbar = blk.Bbar;
      h.C = blk.C;
      h.Cbar = blk.Cbar;
      h.D = blk.D;
      h.Dbar = blk.Dbar;
      h.M = blk.M;
      h.Mbar = blk.Mbar;
      h.Nn = blk.N;
      h.Nbar = blk.Nbar;
      h.Q = blk.Q;
      h.Qbar = blk.Qbar;
      h.S = blk.S;
      h.S1 = g.S1bar[i][p];
      h.S2 = g.S2bar[i][p];
      h.R = blk.R;
      h.Rbar = blk.Rbar;
      h.Rinv = spd_inverse(blk.R, Errc::r_not_invertible, "R");
      h.Rsuminv = spd_inverse(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
      h.b = blk.b;
      h.sigma = blk.sigma;
      h.gamma = blk.gamma;
      h.q = blk.q;
      h.r = blk.r;
      h.qbar = blk.qbar;
      h.rbar = blk.rbar;
      const Eigen::MatrixXd RinvS = h.Rinv * blk.S;
      h.sA = blk.A - blk.B * RinvS;
      h.sC = blk.C - blk.D * RinvS;
      h.sM = blk.M - blk.N * RinvS;
      h.sQ = blk.Q - blk.S.transpose() * RinvS;
      h.kappaI_plus_sA = kappa * eye + h.sA;
      h.SsumS1 = blk.S + h.S1;
      h.Qbar_eff = blk.Qbar - blk.S.transpose() * h.Rinv * h.S1;
      h.U_eff = h.S2.transpose() - blk.S.transpose() * h.Rinv * blk.Rbar;
      h.q_eff = blk.q - blk.S.transpose() * h.Rinv * blk.r;
      tab->data[i].push_back(std::move(h));
    }
  }
  return tab;
}

// Equilibrium control evaluated per particle from the backward variables,
// solving the implicit conditional-mean relation in closed form.
Eigen::MatrixXd equilibrium_control(const GameData& h, const Eigen::MatrixXd& X,
                                    const ThetaBlock& th, const JointMoments& jm) {
  Eigen::MatrixXd rho = th.Y * h.B + th.Z * h.D + th.Z0 * h.Nn;
  const Eigen::VectorXd rho_mean =
      h.B.transpose() * jm.y_mean + h.D.transpose() * jm.z_mean + h.Nn.transpose() * jm.z0_mean;
  Eigen::MatrixXd centered = (X.rowwise() - jm.x_mean.transpose()) * h.S.transpose() +
                             (rho.rowwise() - rho_mean.transpose());
  Eigen::MatrixXd U = -centered * h.Rinv;
  U.rowwise() -= (h.Rsuminv * (h.SsumS1 * jm.x_mean + rho_mean + h.r)).transpose();
  return U;
}

}  // namespace

PopulationProfile PopulationProfile::zero(const TimeGrid& grid, int scenarios, int n, int m) {
  PopulationProfile p;
  p.grid = grid;
  p.X.assign(scenarios, Eigen::MatrixXd::Zero(grid.nodes(), n));
  p.u.assign(scenarios, Eigen::MatrixXd::Zero(grid.nodes(), m));
  return p;
}

PopulationProfile project_profile(const ControlProcess& u,
                                  const std::vector<ParticleEnsemble>& ensembles) {
  if (ensembles.empty() || u.values.size() != ensembles.size())
    fail(Errc::grid_mismatch, "project_profile: control/ensemble mismatch");
  if (!(u.grid == ensembles[0].grid)) fail(Errc::grid_mismatch, "project_profile: grids differ");
  PopulationProfile p;
  p.grid = u.grid;
  const int S = static_cast<int>(ensembles.size());
  const int nodes = u.grid.nodes();
  const int n = static_cast<int>(ensembles[0].states[0].cols());
  p.X.assign(S, Eigen::MatrixXd(nodes, n));
  p.u.assign(S, Eigen::MatrixXd(nodes, u.m));
  for (int sc = 0; sc < S; ++sc) {
    for (int k = 0; k < nodes; ++k) {
      p.X[sc].row(k) = ensembles[sc].states[k].colwise().mean();
      p.u[sc].row(k) = u.values[sc][k].colwise().mean();
    }
  }
  return p;
}

double profile_distance(const PopulationProfile& a, const PopulationProfile& b, double kappa) {
  if (!(a.grid == b.grid) || a.X.size() != b.X.size())
    fail(Errc::grid_mismatch, "profiles not comparable");
  const int nodes = a.grid.nodes();
  const int S = static_cast<int>(a.X.size());
  double acc = 0.0;
  for (int k = 0; k < nodes; ++k) {
    double node = 0.0;
    for (int sc = 0; sc < S; ++sc)
      node += (a.X[sc].row(k) - b.X[sc].row(k)).squaredNorm() +
              (a.u[sc].row(k) - b.u[sc].row(k)).squaredNorm();
    node /= static_cast<double>(S);
    acc += (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * std::exp(kappa * a.grid.node(k)) * node *
           a.grid.dt;
  }
  return acc;
}

BestResponseResult best_response(const GameCoefficients& g, const PopulationProfile& profile,
                                 const Eigen::VectorXd& x_t, int initial_regime,
                                 const LQNumerics& numerics) {
  const auto& c = g.base;
  auto tab = build_game_table(g, numerics.kappa);
  auto prof = std::make_shared<PopulationProfile>(profile);

  FBSDEProblem p;
  p.dims = c.dims;
  p.grid = profile.grid;
  p.scenarios = numerics.scenarios;
  p.particles = numerics.particles;
  p.seed = numerics.seed;
  p.gen = numerics.gen;
  p.initial_regime = initial_regime;
  p.kappa = numerics.kappa;
  p.kappa_star = c.kappa_star;
  const KappaBounds kb = compute_game_kappa_bounds(g, numerics.kappa, c.kappa_star);
  p.kappa_x = kb.kappa_x;
  p.kappa_y = kb.kappa_y;
  p.x_t = x_t;
  p.bsde.basis = numerics.basis;
  p.bsde.picard_inner = numerics.picard_inner;
  p.bsde.threads = numerics.threads;

  // pointwise best-response control against the frozen profile
  auto br_control = [tab, prof](const StepContext& ctx, const Eigen::MatrixXd& X,
                                const ThetaBlock& th) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::VectorXd Xb = prof->X[ctx.scenario].row(ctx.node).transpose();
    const Eigen::VectorXd ub = prof->u[ctx.scenario].row(ctx.node).transpose();
    Eigen::MatrixXd arg = X * h.S.transpose() + th.Y * h.B + th.Z * h.D + th.Z0 * h.Nn;
    arg.rowwise() += (h.S1 * Xb + h.Rbar * ub + h.r).transpose();
    return Eigen::MatrixXd(-arg * h.Rinv);
  };

  p.cb.drift = [tab, prof, br_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                       const ThetaBlock& th, const JointMoments&) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::VectorXd Xb = prof->X[ctx.scenario].row(ctx.node).transpose();
    const Eigen::VectorXd ub = prof->u[ctx.scenario].row(ctx.node).transpose();
    const Eigen::MatrixXd U = br_control(ctx, X, th);
    Eigen::MatrixXd out = X * h.A.transpose();
    out.noalias() += U * h.B.transpose();
    out.rowwise() += (h.Abar * Xb + h.Bbar * ub + h.b).transpose();
    return out;
  };
  p.cb.diff_idio = [tab, prof, br_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                           const ThetaBlock& th, const JointMoments&) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::VectorXd Xb = prof->X[ctx.scenario].row(ctx.node).transpose();
    const Eigen::VectorXd ub = prof->u[ctx.scenario].row(ctx.node).transpose();
    const Eigen::MatrixXd U = br_control(ctx, X, th);
    Eigen::MatrixXd out = X * h.C.transpose();
    out.noalias() += U * h.D.transpose();
    out.rowwise() += (h.Cbar * Xb + h.Dbar * ub + h.sigma).transpose();
    return out;
  };
  p.cb.diff_common = [tab, prof, br_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                             const ThetaBlock& th, const JointMoments&) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::VectorXd Xb = prof->X[ctx.scenario].row(ctx.node).transpose();
    const Eigen::VectorXd ub = prof->u[ctx.scenario].row(ctx.node).transpose();
    const Eigen::MatrixXd U = br_control(ctx, X, th);
    Eigen::MatrixXd out = X * h.M.transpose();
    out.noalias() += U * h.Nn.transpose();
    out.rowwise() += (h.Mbar * Xb + h.Nbar * ub + h.gamma).transpose();
    return out;
  };
  p.cb.driver = [tab, prof](const StepContext& ctx, const Eigen::MatrixXd& X,
                            const ThetaBlock& th, const JointMoments&) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::VectorXd Xb = prof->X[ctx.scenario].row(ctx.node).transpose();
    const Eigen::VectorXd ub = prof->u[ctx.scenario].row(ctx.node).transpose();
    // bold q - S^T R^{-1} bold r, with the profile folded in
    const Eigen::VectorXd inhom = h.Qbar_eff * Xb + h.U_eff * ub + h.q_eff;
    Eigen::MatrixXd out = X * h.sQ.transpose();
    out.noalias() += th.Y * h.kappaI_plus_sA;
    out.noalias() += th.Z * h.sC;
    out.noalias() += th.Z0 * h.sM;
    out.rowwise() += inhom.transpose();
    return out;
  };

  PicardOptions popts;
  popts.damping = numerics.damping;
  popts.tol = numerics.tol;
  popts.max_iters = numerics.max_iters;
  popts.threads = numerics.threads;

  BestResponseResult res;
  res.fbsde = numerics.lambda_steps.size() >= 2
                  ? solve_fbsde_continuation(p, numerics.lambda_steps, popts)
                  : solve_fbsde_picard(p, popts);

  const int nodes = p.grid.nodes();
  res.u.grid = p.grid;
  res.u.m = c.dims.m;
  res.u.values.assign(p.scenarios, std::vector<Eigen::MatrixXd>(nodes));
  parallel_for(p.scenarios, numerics.threads, [&](int sc) {
    for (int k = 0; k < nodes; ++k) {
      const auto& ens = res.fbsde.ensembles[sc];
      StepContext ctx{p.grid.node(k), k, sc, ens.regime.states[k]};
      const ThetaBlock th = res.fbsde.theta_at(sc, k);
      res.u.values[sc][k] = br_control(ctx, ens.states[k], th);
    }
  });
  return res;
}

FBSDEProblem assemble_game_hamiltonian(const GameCoefficients& g, double kappa) {
  auto tab = build_game_table(g, kappa);
  const auto& c = g.base;

  FBSDEProblem p;
  p.dims = c.dims;
  p.kappa = kappa;
  p.kappa_star = c.kappa_star;

  auto eq_control = [tab](const StepContext& ctx, const Eigen::MatrixXd& X,
                          const ThetaBlock& th, const JointMoments& jm) {
    return equilibrium_control(tab->at(ctx.regime, ctx.s), X, th, jm);
  };

  p.cb.drift = [tab, eq_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                 const ThetaBlock& th, const JointMoments& jm) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = eq_control(ctx, X, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.A.transpose();
    out.noalias() += U * h.B.transpose();
    out.rowwise() += (h.Abar * jm.x_mean + h.Bbar * Um + h.b).transpose();
    return out;
  };
  p.cb.diff_idio = [tab, eq_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                     const ThetaBlock& th, const JointMoments& jm) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = eq_control(ctx, X, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.C.transpose();
    out.noalias() += U * h.D.transpose();
    out.rowwise() += (h.Cbar * jm.x_mean + h.Dbar * Um + h.sigma).transpose();
    return out;
  };
  p.cb.diff_common = [tab, eq_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                       const ThetaBlock& th, const JointMoments& jm) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = eq_control(ctx, X, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.M.transpose();
    out.noalias() += U * h.Nn.transpose();
    out.rowwise() += (h.Mbar * jm.x_mean + h.Nbar * Um + h.gamma).transpose();
    return out;
  };
  p.cb.driver = [tab, eq_control](const StepContext& ctx, const Eigen::MatrixXd& X,
                                  const ThetaBlock& th, const JointMoments& jm) {
    const GameData& h = tab->at(ctx.regime, ctx.s);
    const Eigen::MatrixXd U = eq_control(ctx, X, th, jm);
    const Eigen::VectorXd Um = U.colwise().mean().transpose();
    Eigen::MatrixXd out = X * h.sQ.transpose();
    out.noalias() += th.Y * h.kappaI_plus_sA;
    out.noalias() += th.Z * h.sC;
    out.noalias() += th.Z0 * h.sM;
    out.rowwise() += (h.Qbar_eff * jm.x_mean + h.U_eff * Um + h.q_eff).transpose();
    return out;
  };
  return p;
}

std::vector<ParticleEnsemble> simulate_game_state(const GameCoefficients& g,
                                                  const ControlProcess& u,
                                                  const PopulationProfile& profile,
                                                  const Eigen::VectorXd& x_t,
                                                  int initial_regime,
                                                  const LQNumerics& numerics) {
  const auto& c = g.base;
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
      const Eigen::VectorXd Xb = profile.X[sc].row(k).transpose();
      const Eigen::VectorXd ub = profile.u[sc].row(k).transpose();

      Eigen::MatrixXd next = X;
      {
        Eigen::MatrixXd drift = X * blk.A.transpose();
        drift.noalias() += U * blk.B.transpose();
        drift.rowwise() += (blk.Abar * Xb + blk.Bbar * ub + blk.b).transpose();
        next.noalias() += dt * drift;
      }
      {
        Eigen::MatrixXd sig = X * blk.C.transpose();
        sig.noalias() += U * blk.D.transpose();
        sig.rowwise() += (blk.Cbar * Xb + blk.Dbar * ub + blk.sigma).transpose();
        const Eigen::MatrixXd dW = sdt * idiosyncratic_normals(fs.seed, sc, k, N, d);
        for (int col = 0; col < d; ++col)
          next.array() += sig.middleCols(col * n, n).array().colwise() * dW.col(col).array();
      }
      {
        Eigen::MatrixXd sig0 = X * blk.M.transpose();
        sig0.noalias() += U * blk.N.transpose();
        sig0.rowwise() += (blk.Mbar * Xb + blk.Nbar * ub + blk.gamma).transpose();
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

GameCostResult game_cost(const GameCoefficients& g, const ControlProcess& u,
                         const std::vector<ParticleEnsemble>& ensembles,
                         const PopulationProfile& profile, double kappa) {
  const auto& c = g.base;
  if (!(u.grid == ensembles[0].grid) || !(u.grid == profile.grid))
    fail(Errc::grid_mismatch, "game_cost: layouts differ");
  const TimeGrid grid = u.grid;
  const int S = static_cast<int>(ensembles.size());
  const int nodes = grid.nodes();
  GameCostResult out;
  out.per_scenario.setZero(S);
  for (int sc = 0; sc < S; ++sc) {
    const auto& ens = ensembles[sc];
    double acc = 0.0;
    for (int k = 0; k < nodes; ++k) {
      const double s = grid.node(k);
      const int regime = ens.regime.states[k];
      const auto& blk = c.at(regime, s);
      const auto& S1 = g.S1bar[regime][c.piece_index(s)];
      const auto& S2 = g.S2bar[regime][c.piece_index(s)];
      const Eigen::MatrixXd& X = ens.states[k];
      const Eigen::MatrixXd& U = u.values[sc][k];
      const double N = static_cast<double>(X.rows());
      const Eigen::VectorXd Xb = profile.X[sc].row(k).transpose();
      const Eigen::VectorXd ub = profile.u[sc].row(k).transpose();
      const Eigen::VectorXd bq = blk.Qbar * Xb + S2.transpose() * ub + blk.q;
      const Eigen::VectorXd br = S1 * Xb + blk.Rbar * ub + blk.r;

      double val = (X * blk.Q.transpose()).cwiseProduct(X).sum() / N;
      val += 2.0 * (X * blk.S.transpose()).cwiseProduct(U).sum() / N;
      val += (U * blk.R.transpose()).cwiseProduct(U).sum() / N;
      val += 2.0 * (X * bq).mean() + 2.0 * (U * br).mean();
      val += 2.0 * blk.qbar.dot(Xb) + 2.0 * blk.rbar.dot(ub);

      acc += (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * std::exp(kappa * s) * val * grid.dt;
    }
    out.per_scenario(sc) = 0.5 * acc;
  }
  out.total = out.per_scenario.mean();
  if (S > 1)
    out.std_error = std::sqrt((out.per_scenario.array() - out.total).square().sum() /
                              static_cast<double>(S - 1) / static_cast<double>(S));
  return out;
}

EquilibriumReport solve_game_fixed_point(const GameCoefficients& g, const Eigen::VectorXd& x_t,
                                         int initial_regime, const LQNumerics& numerics,
                                         GameSolveMode mode) {
  const auto& c = g.base;
  EquilibriumReport rep;
  rep.structure = check_game_structure(g);
  rep.bounds = compute_game_kappa_bounds(g, numerics.kappa, c.kappa_star);
  if (mode == GameSolveMode::direct && !rep.structure.pass && !numerics.force)
    fail(Errc::pd_violation,
         "game structure conditions fail: " + rep.structure.first_failure);

  double T = numerics.T;
  if (std::isnan(T)) {
    if (!(rep.bounds.kappa_bar > numerics.kappa))
      fail(Errc::invalid_argument, "tail tolerance unreachable; supply an explicit horizon");
    T = numerics.t0 + std::log(1.0 / numerics.tail_tol) / (rep.bounds.kappa_bar - numerics.kappa);
    const int steps = static_cast<int>(std::ceil((T - numerics.t0) / numerics.dt));
    T = numerics.t0 + steps * numerics.dt;
  }
  rep.grid = TimeGrid(numerics.t0, T, numerics.dt);

  LQNumerics num = numerics;
  num.T = T;

  if (mode == GameSolveMode::direct) {
    FBSDEProblem p = assemble_game_hamiltonian(g, numerics.kappa);
    p.grid = rep.grid;
    p.scenarios = numerics.scenarios;
    p.particles = numerics.particles;
    p.seed = numerics.seed;
    p.gen = numerics.gen;
    p.initial_regime = initial_regime;
    p.kappa_x = rep.bounds.kappa_x;
    p.kappa_y = rep.bounds.kappa_y;
    p.x_t = x_t;
    p.bsde.basis = numerics.basis;
    p.bsde.picard_inner = numerics.picard_inner;
    p.bsde.threads = numerics.threads;

    PicardOptions popts;
    popts.damping = numerics.damping;
    popts.tol = numerics.tol;
    popts.max_iters = numerics.max_iters;
    popts.threads = numerics.threads;
    rep.fbsde = numerics.lambda_steps.size() >= 2
                    ? solve_fbsde_continuation(p, numerics.lambda_steps, popts)
                    : solve_fbsde_picard(p, popts);
    rep.converged = rep.fbsde.converged;

    auto tab = build_game_table(g, numerics.kappa);
    const int nodes = rep.grid.nodes();
    rep.u.grid = rep.grid;
    rep.u.m = c.dims.m;
    rep.u.values.assign(numerics.scenarios, std::vector<Eigen::MatrixXd>(nodes));
    parallel_for(numerics.scenarios, numerics.threads, [&](int sc) {
      for (int k = 0; k < nodes; ++k) {
        const auto& ens = rep.fbsde.ensembles[sc];
        const int regime = ens.regime.states[k];
        const ThetaBlock th = rep.fbsde.theta_at(sc, k);
        JointMoments jm;
        jm.x_mean = ens.states[k].colwise().mean().transpose();
        jm.y_mean = th.Y.colwise().mean().transpose();
        jm.z_mean = th.Z.colwise().mean().transpose();
        jm.z0_mean = th.Z0.colwise().mean().transpose();
        rep.u.values[sc][k] =
            equilibrium_control(tab->at(regime, rep.grid.node(k)), ens.states[k], th, jm);
      }
    });
    rep.profile = project_profile(rep.u, rep.fbsde.ensembles);
  } else {
    PopulationProfile profile =
        PopulationProfile::zero(rep.grid, numerics.scenarios, c.dims.n, c.dims.m);
    BestResponseResult br;
    const int max_outer = 30;
    bool ok = false;
    for (int it = 0; it < max_outer; ++it) {
      br = best_response(g, profile, x_t, initial_regime, num);
      PopulationProfile fresh = project_profile(br.u, br.fbsde.ensembles);
      const double gap = profile_distance(fresh, profile, numerics.kappa);
      rep.outer_gaps.push_back(gap);
      rep.outer_iterations = it + 1;
      // damped profile update
      for (std::size_t sc = 0; sc < profile.X.size(); ++sc) {
        profile.X[sc] = numerics.damping * fresh.X[sc] + (1.0 - numerics.damping) * profile.X[sc];
        profile.u[sc] = numerics.damping * fresh.u[sc] + (1.0 - numerics.damping) * profile.u[sc];
      }
      if (gap < numerics.tol) {
        ok = true;
        break;
      }
    }
    rep.converged = ok && br.fbsde.converged;
    rep.u = br.u;
    rep.fbsde = std::move(br.fbsde);
    rep.profile = project_profile(rep.u, rep.fbsde.ensembles);
  }

  // fixed-point diagnostics: one best response against the reported profile
  {
    BestResponseResult probe = best_response(g, rep.profile, x_t, initial_regime, num);
    double gap = 0.0;
    const int nodes = rep.grid.nodes();
    for (int k = 0; k < nodes; ++k) {
      double node = 0.0;
      for (int sc = 0; sc < numerics.scenarios; ++sc) {
        node += (probe.fbsde.ensembles[sc].states[k] - rep.fbsde.ensembles[sc].states[k])
                    .squaredNorm() /
                static_cast<double>(numerics.particles);
        node += (probe.u.values[sc][k] - rep.u.values[sc][k]).squaredNorm() /
                static_cast<double>(numerics.particles);
      }
      node /= static_cast<double>(numerics.scenarios);
      gap += (k == 0 || k == nodes - 1 ? 0.5 : 1.0) * std::exp(numerics.kappa * rep.grid.node(k)) *
             node * rep.grid.dt;
    }
    rep.fixed_point_gap = gap;
    rep.consistency_gap =
        profile_distance(project_profile(probe.u, probe.fbsde.ensembles), rep.profile,
                         numerics.kappa);
  }
  return rep;
}

NashDeviationTable nash_deviation_test(const GameCoefficients& g,
                                       const EquilibriumReport& report,
                                       const Eigen::VectorXd& x_t, int initial_regime,
                                       const LQNumerics& numerics, int deviations,
                                       const std::vector<double>& eps_list,
                                       std::uint64_t seed) {
  NashDeviationTable table;
  table.all_pass = true;
  const auto& profile = report.profile;
  const TimeGrid grid = report.grid;
  const int S = numerics.scenarios;
  const int nodes = grid.nodes();
  LQNumerics num = numerics;
  num.T = grid.T;

  // state and cost at the equilibrium control against the frozen profile
  auto eq_state = simulate_game_state(g, report.u, profile, x_t, initial_regime, num);
  const GameCostResult eq_cost = game_cost(g, report.u, eq_state, profile, numerics.kappa);

  rng::Key key = rng::Key(seed).child(rng::kUser, 0xDE);
  int trial = 0;
  for (int dev = 0; dev < deviations; ++dev) {
    // F0-adapted direction, constant in time per scenario: smooth probes
    // stay coherent against a miscalibrated control, where nodewise noise
    // would average itself out of the first-order cost response
    ControlProcess v = ControlProcess::zero(grid, S, numerics.particles, report.u.m);
    for (int sc = 0; sc < S; ++sc) {
      rng::Key vk = key.child(dev, sc);
      for (int c0 = 0; c0 < report.u.m; ++c0) {
        const double draw = rng::normal(vk, c0);
        for (int k = 0; k < nodes; ++k) v.values[sc][k].col(c0).setConstant(draw);
      }
    }
    for (double eps : eps_list) {
      ControlProcess u_dev = lin_comb(1.0, report.u, eps, v);
      auto dev_state = simulate_game_state(g, u_dev, profile, x_t, initial_regime, num);
      const GameCostResult dev_cost = game_cost(g, u_dev, dev_state, profile, numerics.kappa);
      const Eigen::VectorXd diff = dev_cost.per_scenario - eq_cost.per_scenario;
      const double mean_diff = diff.mean();
      double se = 0.0;
      if (S > 1)
        se = std::sqrt((diff.array() - mean_diff).square().sum() / static_cast<double>(S - 1) /
                       static_cast<double>(S));
      NashDeviationRow row;
      row.trial = trial++;
      row.eps = eps;
      row.cost_equilibrium = eq_cost.total;
      row.cost_deviation = dev_cost.total;
      row.se_difference = se;
      row.pass = eq_cost.total <= dev_cost.total + 2.0 * se;
      table.all_pass &= row.pass;
      table.rows.push_back(row);
    }
  }
  return table;
}

StationarityReport game_stationarity_residual(const GameCoefficients& g,
                                              const EquilibriumReport& report, double kappa) {
  const auto& c = g.base;
  const TimeGrid grid = report.grid;
  const int S = static_cast<int>(report.fbsde.ensembles.size());
  const int nodes = grid.nodes();
  StationarityReport rep;
  rep.grid = grid;
  rep.node_norms.setZero(nodes);
  for (int k = 0; k < nodes; ++k) {
    double acc = 0.0;
    long count = 0;
    for (int sc = 0; sc < S; ++sc) {
      const auto& ens = report.fbsde.ensembles[sc];
      const double s = grid.node(k);
      const int regime = ens.regime.states[k];
      const auto& blk = c.at(regime, s);
      const auto& S1 = g.S1bar[regime][c.piece_index(s)];
      const ThetaBlock th = report.fbsde.theta_at(sc, k);
      const Eigen::VectorXd Xb = report.profile.X[sc].row(k).transpose();
      const Eigen::VectorXd ub = report.profile.u[sc].row(k).transpose();
      Eigen::MatrixXd res = report.u.values[sc][k] * blk.R + ens.states[k] * blk.S.transpose() +
                            th.Y * blk.B + th.Z * blk.D + th.Z0 * blk.N;
      res.rowwise() += (S1 * Xb + blk.Rbar * ub + blk.r).transpose();
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

MonotonicityFunctionals game_monotonicity_functionals(const GameCoefficients& g) {
  MonotonicityFunctionals fn;
  const TheoremFunctionals tf = game_theorem_functionals(g);
  fn.beta1 = tf.beta1;
  fn.beta2 = 0.0;
  fn.beta1_monotonicity = tf.L2;  // the game theorem proves the sharper bound
  auto gg = std::make_shared<GameCoefficients>(g);
  fn.varphi = [gg](double s, const ThetaBlock& th, const ThetaBlock& thb, const JointMoments&,
                   const JointMoments&, int regime) {
    const auto& blk = gg->base.at(regime, s);
    const Eigen::MatrixXd drho =
        (th.Y - thb.Y) * blk.B + (th.Z - thb.Z) * blk.D + (th.Z0 - thb.Z0) * blk.N;
    return drho.squaredNorm() / static_cast<double>(drho.rows());
  };
  return fn;
}

}  // namespace mfrs
