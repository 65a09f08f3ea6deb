#include "mfrs/backward.hpp"

#include <cmath>

#include "mfrs/errors.hpp"
#include "mfrs/parallel.hpp"

namespace mfrs {

namespace {

// group sizes in column order: [1 | x | m | x ox x | x ox m | m ox m]
std::vector<int> layout_for(const RegressionBasisSpec& spec, int n) {
  std::vector<int> groups{1};
  if (spec.x_degree >= 1) groups.push_back(n);
  if (spec.mean_degree >= 1) groups.push_back(n);
  if (spec.x_degree >= 2) groups.push_back(n * (n + 1) / 2);
  if (spec.x_degree >= 1 && spec.mean_degree >= 1) groups.push_back(n * n);
  if (spec.mean_degree >= 2) groups.push_back(n * (n + 1) / 2);
  return groups;
}

}  // namespace

int basis_levels(const RegressionBasisSpec& spec) {
  return static_cast<int>(layout_for(spec, 1).size());
}

int basis_size(const RegressionBasisSpec& spec, int n, int level) {
  const auto groups = layout_for(spec, n);
  int cols = 0;
  for (int g = 0; g < level && g < static_cast<int>(groups.size()); ++g) cols += groups[g];
  return cols;
}

Eigen::MatrixXd eval_basis(const RegressionBasisSpec& spec, const Eigen::MatrixXd& X,
                           const Eigen::VectorXd& mean) {
  const int N = static_cast<int>(X.rows());
  const int n = static_cast<int>(X.cols());
  Eigen::MatrixXd psi(N, basis_size(spec, n, basis_levels(spec)));
  int col = 0;
  psi.col(col++).setOnes();
  if (spec.x_degree >= 1)
    for (int r = 0; r < n; ++r) psi.col(col++) = X.col(r);
  if (spec.mean_degree >= 1)
    for (int r = 0; r < n; ++r) psi.col(col++).setConstant(mean(r));
  if (spec.x_degree >= 2)
    for (int r = 0; r < n; ++r)
      for (int c = r; c < n; ++c) psi.col(col++) = X.col(r).cwiseProduct(X.col(c));
  if (spec.x_degree >= 1 && spec.mean_degree >= 1)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) psi.col(col++) = X.col(r) * mean(c);
  if (spec.mean_degree >= 2)
    for (int r = 0; r < n; ++r)
      for (int c = r; c < n; ++c) psi.col(col++).setConstant(mean(r) * mean(c));
  return psi;
}

void ThetaFit::allocate(const RegressionBasisSpec& spec, int n_, int d_, int d0_, int m0_,
                        int nodes_) {
  basis = spec;
  n = n_;
  d = d_;
  d0 = d0_;
  m0 = m0_;
  nodes = nodes_;
  const int bs = basis_size(spec, n, basis_levels(spec));
  coefY.assign(nodes, std::vector<Eigen::MatrixXd>(m0, Eigen::MatrixXd::Zero(bs, n)));
  coefZ.assign(nodes, std::vector<Eigen::MatrixXd>(m0, Eigen::MatrixXd::Zero(bs, n * d)));
  coefZ0.assign(nodes, std::vector<Eigen::MatrixXd>(m0, Eigen::MatrixXd::Zero(bs, n * d0)));
  coefK.assign(nodes, std::vector<Eigen::VectorXd>(m0 * m0, Eigen::VectorXd::Zero(n)));
  range_lo.assign(nodes, std::vector<Eigen::VectorXd>(
                             m0, Eigen::VectorXd::Constant(
                                     n, std::numeric_limits<double>::infinity())));
  range_hi.assign(nodes, std::vector<Eigen::VectorXd>(
                             m0, Eigen::VectorXd::Constant(
                                     n, -std::numeric_limits<double>::infinity())));
}

ThetaBlock ThetaFit::evaluate(int node, int regime, const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& mean) const {
  const int slot = pooled ? 0 : regime;
  const Eigen::VectorXd& lo = range_lo[node][slot];
  const Eigen::VectorXd& hi = range_hi[node][slot];
  Eigen::MatrixXd psi;
  if (lo.size() == X.cols() && (lo.array() <= hi.array()).all()) {
    const Eigen::ArrayXd pad = 0.1 * (hi - lo).array() + 1e-12;
    const Eigen::ArrayXd clo = lo.array() - pad;
    const Eigen::ArrayXd chi = hi.array() + pad;
    Eigen::MatrixXd Xc = X;
    Eigen::VectorXd mc = mean;
    for (int c = 0; c < X.cols(); ++c) {
      Xc.col(c) = Xc.col(c).array().max(clo(c)).min(chi(c));
      mc(c) = std::min(std::max(mc(c), clo(c)), chi(c));
    }
    psi = eval_basis(basis, Xc, mc);
  } else {
    psi = eval_basis(basis, X, mean);
  }
  ThetaBlock th;
  th.Y.noalias() = psi * coefY[node][slot];
  th.Z.noalias() = psi * coefZ[node][slot];
  th.Z0.noalias() = psi * coefZ0[node][slot];
  return th;
}

void ThetaFit::blend_from(const ThetaFit& fresh, double th_damp) {
  for (int k = 0; k < nodes; ++k) {
    for (int i = 0; i < m0; ++i) {
      coefY[k][i] = th_damp * fresh.coefY[k][i] + (1.0 - th_damp) * coefY[k][i];
      coefZ[k][i] = th_damp * fresh.coefZ[k][i] + (1.0 - th_damp) * coefZ[k][i];
      coefZ0[k][i] = th_damp * fresh.coefZ0[k][i] + (1.0 - th_damp) * coefZ0[k][i];
    }
    for (int ij = 0; ij < m0 * m0; ++ij)
      coefK[k][ij] = th_damp * fresh.coefK[k][ij] + (1.0 - th_damp) * coefK[k][ij];
    for (int i = 0; i < m0; ++i) {
      range_lo[k][i] = range_lo[k][i].cwiseMin(fresh.range_lo[k][i]);
      range_hi[k][i] = range_hi[k][i].cwiseMax(fresh.range_hi[k][i]);
    }
  }
}

double BackwardSolution::mean_sq_y(int node) const {
  double acc = 0.0;
  long count = 0;
  for (const auto& per_scenario : Y) {
    acc += per_scenario[node].squaredNorm();
    count += per_scenario[node].rows();
  }
  return acc / static_cast<double>(count);
}

namespace {

// Pooled per-regime least squares at one time node, with a downgrade ladder
// over basis prefixes when the Gram matrix is ill conditioned.
struct RegimeRegression {
  Eigen::MatrixXd gram;
  Eigen::LDLT<Eigen::MatrixXd> factor;
  int level_cols = 0;
  double condition = 0.0;
  bool downgraded = false;

  void prepare(const RegressionBasisSpec& spec, int n) {
    int cols = gram.rows();
    for (int level = basis_levels(spec); level >= 1; --level) {
      cols = basis_size(spec, n, level);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram.topLeftCorner(cols, cols),
                                                        Eigen::EigenvaluesOnly);
      const double lo = es.eigenvalues().minCoeff();
      const double hi = es.eigenvalues().maxCoeff();
      condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
      if (condition <= spec.condition_threshold || level == 1) break;
      downgraded = true;
    }
    level_cols = cols;
    factor.compute(gram.topLeftCorner(cols, cols));
  }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const {
    Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(rhs.rows(), rhs.cols());
    coef.topRows(level_cols) = factor.solve(rhs.topRows(level_cols));
    return coef;
  }
};

std::vector<std::vector<std::pair<int, int>>> jumps_by_step(const ParticleEnsemble& ens) {
  std::vector<std::vector<std::pair<int, int>>> out(ens.grid.steps());
  for (std::size_t j = 0; j < ens.regime.jump_times.size(); ++j) {
    double tj = ens.regime.jump_times[j];
    int k = static_cast<int>(std::ceil((tj - ens.grid.t0) / ens.grid.dt)) - 1;
    k = std::min(std::max(k, 0), ens.grid.steps() - 1);
    out[k].push_back(ens.regime.jump_pairs[j]);
  }
  return out;
}

}  // namespace

BackwardSolution solve_mkv_bsde(const DriverCallback& driver,
                                const std::vector<ParticleEnsemble>& ensembles,
                                const std::vector<Eigen::MatrixXd>& terminal,
                                const GeneratorMatrix& gen, const BsdeOptions& opts) {
  CtxDriverCallback ctx_driver;
  if (driver)
    ctx_driver = [&driver](const StepContext& ctx, const Eigen::MatrixXd& X,
                           const ThetaBlock& th, const JointMoments& jm) {
      return driver(ctx.s, X, th, jm, ctx.regime);
    };
  return solve_mkv_bsde_ctx(ctx_driver, ensembles, terminal, gen, opts);
}

BackwardSolution solve_mkv_bsde_ctx(const CtxDriverCallback& driver,
                                    const std::vector<ParticleEnsemble>& ensembles,
                                    const std::vector<Eigen::MatrixXd>& terminal,
                                    const GeneratorMatrix& gen, const BsdeOptions& opts) {
  if (ensembles.empty()) fail(Errc::invalid_argument, "solve_mkv_bsde: no ensembles");
  const TimeGrid grid = ensembles[0].grid;
  const int S = static_cast<int>(ensembles.size());
  const int N = ensembles[0].particles();
  const int n = static_cast<int>(ensembles[0].states[0].cols());
  const int steps = grid.steps();
  const int m0 = gen.m0;
  const int d = std::max(1, ensembles[0].idio_d);
  const int d0 = ensembles[0].common.dW0.size() > 0
                     ? static_cast<int>(ensembles[0].common.dW0.cols())
                     : 1;
  if (!terminal.empty() && static_cast<int>(terminal.size()) != S)
    fail(Errc::dimension_mismatch, "terminal must have one block per scenario");
  for (const auto& ens : ensembles)
    if (!(ens.grid == grid) || ens.particles() != N)
      fail(Errc::grid_mismatch, "ensembles must share grid and particle count");

  BackwardSolution sol;
  sol.grid = grid;
  sol.n = n;
  sol.d = d;
  sol.d0 = d0;
  sol.m0 = m0;

  const RegressionBasisSpec& spec = opts.basis;
  const bool pool = spec.pool_regimes;
  const int BS = basis_size(spec, n, basis_levels(spec));
  sol.fit.allocate(spec, n, d, d0, m0, steps + 1);
  sol.fit.pooled = pool;

  if (opts.store_values) {
    sol.Y.assign(S, std::vector<Eigen::MatrixXd>(steps + 1));
    sol.Z.assign(S, std::vector<Eigen::MatrixXd>(steps + 1));
    sol.Z0.assign(S, std::vector<Eigen::MatrixXd>(steps + 1));
  }
  sol.K.assign(steps + 1, std::vector<Eigen::VectorXd>(m0 * m0, Eigen::VectorXd::Zero(n)));

  std::vector<Eigen::MatrixXd> Yval(S);
  for (int sc = 0; sc < S; ++sc)
    Yval[sc] = terminal.empty() ? Eigen::MatrixXd::Zero(N, n) : terminal[sc];

  std::vector<std::vector<std::vector<std::pair<int, int>>>> jump_table(S);
  for (int sc = 0; sc < S; ++sc) jump_table[sc] = jumps_by_step(ensembles[sc]);

  // terminal-node fit so coupled sweeps can evaluate Theta at T
  {
    std::vector<RegimeRegression> regs(m0);
    std::vector<Eigen::MatrixXd> rhs(m0, Eigen::MatrixXd::Zero(BS, n));
    std::vector<bool> seen(m0, false);
    for (int rg = 0; rg < m0; ++rg) regs[rg].gram = Eigen::MatrixXd::Zero(BS, BS);
    for (int sc = 0; sc < S; ++sc) {
      MomentSummary ms = ensembles[sc].moments(steps);
      const Eigen::MatrixXd psi = eval_basis(spec, ensembles[sc].states[steps], ms.mean);
      const int rg = pool ? 0 : ensembles[sc].regime.states[steps];
      seen[rg] = true;
      regs[rg].gram.noalias() += psi.transpose() * psi;
      rhs[rg].noalias() += psi.transpose() * Yval[sc];
      sol.fit.range_lo[steps][rg] =
          sol.fit.range_lo[steps][rg].cwiseMin(ensembles[sc].states[steps].colwise().minCoeff().transpose());
      sol.fit.range_hi[steps][rg] =
          sol.fit.range_hi[steps][rg].cwiseMax(ensembles[sc].states[steps].colwise().maxCoeff().transpose());
    }
    for (int rg = 0; rg < m0; ++rg) {
      if (!seen[rg]) continue;
      regs[rg].prepare(spec, n);
      sol.fit.coefY[steps][rg] = regs[rg].solve(rhs[rg]);
    }
    if (opts.store_values) {
      for (int sc = 0; sc < S; ++sc) {
        sol.Y[sc][steps] = Yval[sc];
        sol.Z[sc][steps] = Eigen::MatrixXd::Zero(N, n * d);
        sol.Z0[sc][steps] = Eigen::MatrixXd::Zero(N, n * d0);
      }
    }
  }

  const double dt = grid.dt;
  const double sdt = std::sqrt(dt);
  std::vector<Eigen::MatrixXd> psi(S), dW(S), ynew(S);
  std::vector<MomentSummary> msx(S);

  for (int k = steps - 1; k >= 0; --k) {
    const double s = grid.node(k);

    parallel_for(S, opts.threads, [&](int sc) {
      msx[sc] = ensembles[sc].moments(k);
      psi[sc] = eval_basis(spec, ensembles[sc].states[k], msx[sc].mean);
      dW[sc] = sdt * idiosyncratic_normals(ensembles[sc].root_seed, ensembles[sc].scenario_id,
                                           k, N, d);
    });

    const int tgt_cols = n + n * d + n * d0;
    std::vector<RegimeRegression> regs(m0);
    std::vector<Eigen::MatrixXd> rhs_ce(m0, Eigen::MatrixXd::Zero(BS, n));
    std::vector<bool> seen(m0, false);
    std::vector<double> sst(m0, 0.0);
    std::vector<Eigen::VectorXd> ysum(m0, Eigen::VectorXd::Zero(n));
    std::vector<long> cnt(m0, 0);
    for (int rg = 0; rg < m0; ++rg) regs[rg].gram = Eigen::MatrixXd::Zero(BS, BS);

    for (int sc = 0; sc < S; ++sc) {
      const int rg = pool ? 0 : ensembles[sc].regime.states[k];
      seen[rg] = true;
      regs[rg].gram.noalias() += psi[sc].transpose() * psi[sc];
      rhs_ce[rg].noalias() += psi[sc].transpose() * Yval[sc];
      ysum[rg] += Yval[sc].colwise().sum().transpose();
      sst[rg] += Yval[sc].squaredNorm();
      cnt[rg] += N;
      sol.fit.range_lo[k][rg] = sol.fit.range_lo[k][rg].cwiseMin(
          ensembles[sc].states[k].colwise().minCoeff().transpose());
      sol.fit.range_hi[k][rg] = sol.fit.range_hi[k][rg].cwiseMax(
          ensembles[sc].states[k].colwise().maxCoeff().transpose());
    }

    std::vector<Eigen::MatrixXd> coef_ce(m0);
    for (int rg = 0; rg < m0; ++rg) {
      if (!seen[rg]) continue;
      regs[rg].prepare(spec, n);
      coef_ce[rg] = regs[rg].solve(rhs_ce[rg]);
      sol.diagnostics.max_condition = std::max(sol.diagnostics.max_condition, regs[rg].condition);
      sol.diagnostics.basis_downgraded |= regs[rg].downgraded;
    }

    // covariation fits: per noise channel, weighted least squares of the
    // centered value (Y_{k+1} - E_k[Y_{k+1}]) * dW on psi with weights dW^2.
    // Centering removes the O(1/dt) variance of the raw product estimator;
    // the realized-quadratic-variation weight normalizes away the (dW)^2
    // fluctuation that otherwise floors the common-channel accuracy at the
    // scenario count.
    const int channels = d + d0;
    std::vector<std::vector<Eigen::MatrixXd>> gram_cov(
        m0, std::vector<Eigen::MatrixXd>(channels, Eigen::MatrixXd::Zero(BS, BS)));
    std::vector<std::vector<Eigen::MatrixXd>> rhs_cov(
        m0, std::vector<Eigen::MatrixXd>(channels, Eigen::MatrixXd::Zero(BS, n)));
    for (int sc = 0; sc < S; ++sc) {
      const int rg = pool ? 0 : ensembles[sc].regime.states[k];
      const Eigen::MatrixXd centered = Yval[sc] - psi[sc] * coef_ce[rg];
      for (int c = 0; c < d; ++c) {
        const Eigen::ArrayXd w = dW[sc].col(c).array();
        const Eigen::MatrixXd psiw = psi[sc].array().colwise() * w;
        gram_cov[rg][c].noalias() += psiw.transpose() * psiw;
        rhs_cov[rg][c].noalias() += psiw.transpose() * centered;
      }
      for (int c = 0; c < d0; ++c) {
        const double w0 = ensembles[sc].common.dW0(k, c);
        gram_cov[rg][d + c].noalias() += (w0 * w0) * (psi[sc].transpose() * psi[sc]);
        rhs_cov[rg][d + c].noalias() += w0 * (psi[sc].transpose() * centered);
      }
    }

    std::vector<Eigen::MatrixXd> coef(m0);
    for (int rg = 0; rg < m0; ++rg) {
      if (!seen[rg]) continue;
      coef[rg] = Eigen::MatrixXd::Zero(BS, tgt_cols);
      coef[rg].leftCols(n) = coef_ce[rg];
      const int lc = regs[rg].level_cols;
      for (int c = 0; c < channels; ++c) {
        Eigen::MatrixXd block = Eigen::MatrixXd::Zero(BS, n);
        const Eigen::MatrixXd gram_lc = gram_cov[rg][c].topLeftCorner(lc, lc);
        if (gram_lc.cwiseAbs().maxCoeff() > 0.0) {
          Eigen::LDLT<Eigen::MatrixXd> ldlt(gram_lc);
          block.topRows(lc) = ldlt.solve(rhs_cov[rg][c].topRows(lc));
        }
        coef[rg].middleCols(n + c * n, n) = block;
      }
      sol.fit.coefZ[k][rg] = coef[rg].middleCols(n, n * d);
      sol.fit.coefZ0[k][rg] = coef[rg].rightCols(n * d0);
    }

    std::vector<double> ssr(m0, 0.0);
    parallel_for(S, opts.threads, [&](int sc) {
      const int rg = ensembles[sc].regime.states[k];
      const Eigen::MatrixXd fitted = psi[sc] * coef[pool ? 0 : rg];
      ThetaBlock th;
      th.Y = fitted.leftCols(n);
      th.Z = fitted.middleCols(n, n * d);
      th.Z0 = fitted.rightCols(n * d0);
      const Eigen::MatrixXd ce = th.Y;
      if (driver) {
        StepContext ctx{s, k, ensembles[sc].scenario_id, rg};
        const int sweeps = std::max(1, opts.picard_inner);
        for (int inner = 0; inner < sweeps; ++inner) {
          JointMoments jm;
          jm.x_mean = msx[sc].mean;
          jm.y_mean = th.Y.colwise().mean().transpose();
          jm.z_mean = th.Z.colwise().mean().transpose();
          jm.z0_mean = th.Z0.colwise().mean().transpose();
          Eigen::MatrixXd next = ce + dt * driver(ctx, ensembles[sc].states[k], th, jm);
          const double gap = (next - th.Y).cwiseAbs().maxCoeff();
          th.Y = std::move(next);
          if (inner > 0 && gap < opts.picard_inner_tol) break;
        }
      }
      if (!th.Y.allFinite())
        fail(Errc::non_finite_state, "non-finite backward value at node " + std::to_string(k));
      ynew[sc] = th.Y;
      if (opts.store_values) {
        sol.Y[sc][k] = th.Y;
        sol.Z[sc][k] = std::move(th.Z);
        sol.Z0[sc][k] = std::move(th.Z0);
      }
    });

    for (int sc = 0; sc < S; ++sc) {
      const int rg = pool ? 0 : ensembles[sc].regime.states[k];
      ssr[rg] += (Yval[sc] - (psi[sc] * coef[rg]).leftCols(n)).squaredNorm();
    }
    for (int rg = 0; rg < m0; ++rg) {
      if (!seen[rg] || cnt[rg] == 0) continue;
      const double total = sst[rg] - ysum[rg].squaredNorm() / static_cast<double>(cnt[rg]);
      if (total > 1e-14)
        sol.diagnostics.min_r_squared =
            std::min(sol.diagnostics.min_r_squared, 1.0 - ssr[rg] / total);
    }

    // refit Y on the same design for the functional representation
    {
      std::vector<Eigen::MatrixXd> rhs_y(m0, Eigen::MatrixXd::Zero(BS, n));
      for (int sc = 0; sc < S; ++sc) {
        const int rg = pool ? 0 : ensembles[sc].regime.states[k];
        rhs_y[rg].noalias() += psi[sc].transpose() * ynew[sc];
      }
      for (int rg = 0; rg < m0; ++rg)
        if (seen[rg]) sol.fit.coefY[k][rg] = regs[rg].solve(rhs_y[rg]);
    }

    // K loadings on the centered jump indicators 1{jump i->j} - a_ij dt 1{alpha=i};
    // identified only at steps where a jump was actually observed
    for (int i = 0; i < m0; ++i) {
      for (int j = 0; j < m0; ++j) {
        if (i == j || gen.a(i, j) <= 0.0) continue;
        double denom = 0.0;
        Eigen::VectorXd numer = Eigen::VectorXd::Zero(n);
        bool any_jump = false;
        for (int sc = 0; sc < S; ++sc) {
          if (ensembles[sc].regime.states[k] != i) continue;
          double count = 0.0;
          for (auto& [from, to] : jump_table[sc][k])
            if (from == i && to == j) count += 1.0;
          const double dM = count - gen.a(i, j) * dt;
          if (count > 0.0) any_jump = true;
          const Eigen::MatrixXd resid = Yval[sc] - (psi[sc] * coef[pool ? 0 : i]).leftCols(n);
          numer += dM * resid.colwise().sum().transpose();
          denom += static_cast<double>(N) * dM * dM;
        }
        if (any_jump && denom > 0.0) {
          sol.K[k][i * m0 + j] = numer / denom;
          sol.fit.coefK[k][i * m0 + j] = sol.K[k][i * m0 + j];
        }
      }
    }

    for (int sc = 0; sc < S; ++sc) Yval[sc] = std::move(ynew[sc]);
  }

  return sol;
}

TransversalityTable transversality_check(const std::vector<BackwardSolution>& solutions,
                                         double kappa, const std::vector<double>& probe_times) {
  if (solutions.empty()) fail(Errc::invalid_argument, "transversality_check: no solutions");
  TransversalityTable table;
  table.probes = probe_times;
  table.values.resize(static_cast<long>(solutions.size()),
                      static_cast<long>(probe_times.size()));
  for (std::size_t h = 0; h < solutions.size(); ++h) {
    const auto& sol = solutions[h];
    table.horizons.push_back(sol.grid.T);
    for (std::size_t p = 0; p < probe_times.size(); ++p) {
      const double tp = probe_times[p];
      if (tp < sol.grid.t0 || tp > sol.grid.T)
        fail(Errc::invalid_argument, "probe time outside horizon");
      const int node = static_cast<int>(std::lround((tp - sol.grid.t0) / sol.grid.dt));
      table.values(static_cast<long>(h), static_cast<long>(p)) =
          std::exp(kappa * sol.grid.node(node)) * sol.mean_sq_y(node);
    }
  }
  return table;
}

}  // namespace mfrs
