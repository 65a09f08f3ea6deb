#include "mfrs/coupled.hpp"

#include <cmath>

#include "mfrs/errors.hpp"
#include "mfrs/parallel.hpp"

namespace mfrs {

ThetaBlock FBSDESolution::theta_at(int scenario, int node) const {
  const auto& ens = ensembles[scenario];
  MomentSummary ms = ens.moments(node);
  return theta.evaluate(node, ens.regime.states[node], ens.states[node], ms.mean);
}

JointMoments FBSDESolution::moments_at(int scenario, int node) const {
  ThetaBlock th = theta_at(scenario, node);
  JointMoments jm;
  jm.x_mean = ensembles[scenario].states[node].colwise().mean().transpose();
  jm.y_mean = th.Y.colwise().mean().transpose();
  jm.z_mean = th.Z.colwise().mean().transpose();
  jm.z0_mean = th.Z0.colwise().mean().transpose();
  return jm;
}

namespace {

struct SweepResult {
  double err_x = 0.0;      // weighted integral of E|dX|^2 vs the previous sweep
  bool have_prev = false;  // false on the first sweep (no previous state grid)
};

// Forward Euler sweep at continuation parameter lambda, freezing theta.
// Overwrites the states in `ens`; accumulates per-node E|dX|^2 against the
// previous grid when one exists.
SweepResult forward_sweep(const FBSDEProblem& p, double lambda, const ThetaFit& theta,
                          std::vector<ParticleEnsemble>& ens, Eigen::MatrixXd& dxsq,
                          const PicardOptions& opts) {
  const int n = p.dims.n, d = p.dims.d, d0 = p.dims.d0;
  const int N = p.particles;
  const int steps = p.grid.steps();
  const double dt = p.grid.dt;
  const double sdt = std::sqrt(dt);
  SweepResult res;
  res.have_prev = !ens[0].states.empty();
  dxsq.setZero(steps + 1, p.scenarios);

  parallel_for(p.scenarios, opts.threads, [&](int sc) {
    auto& e = ens[sc];
    std::vector<Eigen::MatrixXd> old_states;
    if (res.have_prev) old_states = std::move(e.states);
    e.states.assign(steps + 1, Eigen::MatrixXd());

    // initial condition: x_t plus the lambda-scaled y-dependent part
    Eigen::MatrixXd X0 = p.x_t.transpose().replicate(N, 1);
    if (p.phi && lambda > 0.0) {
      // previous sweep's Y at the initial node, or zero on a cold start
      Eigen::MatrixXd Y0 = Eigen::MatrixXd::Zero(N, n);
      if (res.have_prev) {
        MomentSummary ms;
        ms.mean = old_states[0].colwise().mean().transpose();
        Y0 = theta.evaluate(0, e.regime.states[0], old_states[0], ms.mean).Y;
      }
      Eigen::VectorXd EY0 = Y0.colwise().mean().transpose();
      X0 += lambda * p.phi(Y0, EY0, e.regime.states[0]);
    }
    e.states[0] = std::move(X0);
    if (res.have_prev) dxsq(0, sc) = (e.states[0] - old_states[0]).squaredNorm() / N;

    for (int k = 0; k < steps; ++k) {
      const Eigen::MatrixXd& X = e.states[k];
      const double s = p.grid.node(k);
      const int regime = e.regime.states[k];
      StepContext ctx{s, k, sc, regime};

      MomentSummary ms;
      ms.mean = X.colwise().mean().transpose();
      ms.second_moment = X.squaredNorm() / N;
      ThetaBlock th = theta.evaluate(k, regime, X, ms.mean);
      JointMoments jm;
      jm.x_mean = ms.mean;
      jm.y_mean = th.Y.colwise().mean().transpose();
      jm.z_mean = th.Z.colwise().mean().transpose();
      jm.z0_mean = th.Z0.colwise().mean().transpose();

      Eigen::MatrixXd next = X;
      // drift: lambda b + (1-lambda)/2 kappa_x x + b0
      if (p.cb.drift && lambda > 0.0)
        next.noalias() += (dt * lambda) * p.cb.drift(ctx, X, th, jm);
      if (lambda < 1.0) next.noalias() += (dt * 0.5 * (1.0 - lambda) * p.kappa_x) * X;
      if (p.b0) next.rowwise() += dt * p.b0(s).transpose();

      Eigen::MatrixXd dW = sdt * idiosyncratic_normals(p.seed, sc, k, N, d);
      if (p.cb.diff_idio && lambda > 0.0) {
        const Eigen::MatrixXd sig = lambda * p.cb.diff_idio(ctx, X, th, jm);
        for (int c = 0; c < d; ++c)
          next.array() += sig.middleCols(c * n, n).array().colwise() * dW.col(c).array();
      }
      if (p.sigma0) {
        const Eigen::VectorXd s0 = p.sigma0(s);
        for (int c = 0; c < d; ++c)
          next.noalias() += dW.col(c) * s0.segment(c * n, n).transpose();
      }
      if (p.cb.diff_common && lambda > 0.0) {
        const Eigen::MatrixXd sig0 = lambda * p.cb.diff_common(ctx, X, th, jm);
        for (int c = 0; c < d0; ++c)
          next.noalias() += sig0.middleCols(c * n, n) * e.common.dW0(k, c);
      }
      if (p.gamma0) {
        const Eigen::VectorXd g0 = p.gamma0(s);
        for (int c = 0; c < d0; ++c)
          next.rowwise() += (e.common.dW0(k, c) * g0.segment(c * n, n)).transpose();
      }
      if (!next.allFinite())
        fail(Errc::non_finite_state, "non-finite forward state at node " + std::to_string(k + 1));
      e.states[k + 1] = std::move(next);
      if (res.have_prev)
        dxsq(k + 1, sc) = (e.states[k + 1] - old_states[k + 1]).squaredNorm() / N;
    }
  });

  if (res.have_prev) {
    for (int k = 0; k <= steps; ++k) {
      const double w = std::exp(p.kappa * p.grid.node(k)) * dxsq.row(k).mean();
      res.err_x += (k == 0 || k == steps ? 0.5 : 1.0) * w * dt;
    }
  }
  return res;
}

CtxDriverCallback lambda_driver(const FBSDEProblem& p, double lambda) {
  return [&p, lambda](const StepContext& ctx, const Eigen::MatrixXd& X, const ThetaBlock& th,
                      const JointMoments& jm) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(X.rows(), X.cols());
    if (p.cb.driver && lambda > 0.0) out.noalias() += lambda * p.cb.driver(ctx, X, th, jm);
    if (lambda < 1.0) out.noalias() += ((1.0 - lambda) * p.kappa_y) * th.Y;
    if (p.f0) out.rowwise() += p.f0(ctx.s).transpose();
    return out;
  };
}

// Weighted integral of E|Theta_a - Theta_b|^2 evaluated on the current state
// grid; works on the coefficient difference so the basis is evaluated once.
double theta_distance(const FBSDEProblem& p, const std::vector<ParticleEnsemble>& ens,
                      const ThetaFit& a, const ThetaFit& b, const PicardOptions& opts) {
  const int steps = p.grid.steps();
  Eigen::MatrixXd node_err(steps + 1, p.scenarios);
  parallel_for(p.scenarios, opts.threads, [&](int sc) {
    const auto& e = ens[sc];
    for (int k = 0; k <= steps; ++k) {
      MomentSummary ms = e.moments(k);
      const int regime = e.regime.states[k];
      const Eigen::MatrixXd psi = eval_basis(a.basis, e.states[k], ms.mean);
      node_err(k, sc) = ((psi * (a.coefY[k][regime] - b.coefY[k][regime])).squaredNorm() +
                         (psi * (a.coefZ[k][regime] - b.coefZ[k][regime])).squaredNorm() +
                         (psi * (a.coefZ0[k][regime] - b.coefZ0[k][regime])).squaredNorm()) /
                        static_cast<double>(e.states[k].rows());
    }
  });
  double acc = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const double w = std::exp(p.kappa * p.grid.node(k)) * node_err.row(k).mean();
    acc += (k == 0 || k == steps ? 0.5 : 1.0) * w * p.grid.dt;
  }
  return acc;
}

FBSDESolution picard_at_lambda(const FBSDEProblem& p, double lambda, const PicardOptions& opts,
                               const FBSDESolution* warm, double lambda_for_history) {
  const int steps = p.grid.steps();
  FBSDESolution sol;
  sol.grid = p.grid;
  sol.n = p.dims.n;
  sol.d = p.dims.d;
  sol.d0 = p.dims.d0;
  sol.m0 = p.dims.m0;
  sol.kappa = p.kappa;

  // scenario scaffolds: regime paths and common noise, shared by all sweeps
  ForwardSpec fs;
  fs.grid = p.grid;
  fs.scenarios = p.scenarios;
  fs.particles = p.particles;
  fs.seed = p.seed;
  fs.gen = p.gen;
  fs.initial_regime = p.initial_regime;
  sol.ensembles.resize(p.scenarios);
  bool have_warm = warm != nullptr && !warm->ensembles.empty();
  for (int sc = 0; sc < p.scenarios; ++sc) {
    if (have_warm) {
      sol.ensembles[sc] = warm->ensembles[sc];
    } else {
      sol.ensembles[sc] = make_scenario_scaffold(fs, sc);
      sol.ensembles[sc].idio_d = p.dims.d;
      fill_common_noise(sol.ensembles[sc], fs, p.dims.d0);
    }
  }

  if (have_warm) {
    sol.theta = warm->theta;
  } else {
    sol.theta.allocate(p.bsde.basis, p.dims.n, p.dims.d, p.dims.d0, p.dims.m0, steps + 1);
  }

  BsdeOptions bopts = p.bsde;
  bopts.store_values = false;
  bopts.threads = opts.threads;

  Eigen::MatrixXd dxsq;
  double prev_err = std::numeric_limits<double>::quiet_NaN();
  for (int sweep = 1; sweep <= opts.max_iters; ++sweep) {
    SweepResult fres;
    BackwardSolution bsol;
    try {
      fres = forward_sweep(p, lambda, sol.theta, sol.ensembles, dxsq, opts);
      bsol = solve_mkv_bsde_ctx(lambda_driver(p, lambda), sol.ensembles, {}, p.gen, bopts);
    } catch (const Error& e) {
      if (e.code() != Errc::non_finite_state) throw;
      // divergence: report the failed sweep instead of aborting, so the
      // continuation driver can bisect the lambda increment
      SweepRecord rec;
      rec.sweep = sweep;
      rec.lambda = lambda_for_history;
      rec.weighted_error = std::numeric_limits<double>::infinity();
      rec.ratio = 0.0;
      sol.history.push_back(rec);
      sol.sweeps = sweep;
      sol.final_error = rec.weighted_error;
      sol.converged = false;
      return sol;
    }
    sol.diagnostics.max_condition =
        std::max(sol.diagnostics.max_condition, bsol.diagnostics.max_condition);
    sol.diagnostics.min_r_squared =
        std::min(sol.diagnostics.min_r_squared, bsol.diagnostics.min_r_squared);
    sol.diagnostics.basis_downgraded |= bsol.diagnostics.basis_downgraded;

    const bool first_cold = (sweep == 1 && !have_warm && !fres.have_prev);
    double err;
    if (first_cold) {
      sol.theta = std::move(bsol.fit);
      sol.K = std::move(bsol.K);
      err = std::numeric_limits<double>::infinity();
    } else {
      ThetaFit blended = sol.theta;
      blended.blend_from(bsol.fit, opts.damping);
      const double err_theta = theta_distance(p, sol.ensembles, blended, sol.theta, opts);
      sol.theta = std::move(blended);
      sol.K = std::move(bsol.K);
      err = fres.err_x + err_theta;
    }

    SweepRecord rec;
    rec.sweep = sweep;
    rec.lambda = lambda_for_history;
    rec.weighted_error = err;
    rec.ratio = (std::isfinite(prev_err) && prev_err > 0.0) ? err / prev_err : 0.0;
    sol.history.push_back(rec);
    prev_err = err;
    sol.sweeps = sweep;
    sol.final_error = err;
    if (std::isfinite(err) && err < opts.tol) {
      sol.converged = true;
      break;
    }
  }
  return sol;
}

}  // namespace

FBSDESolution solve_fbsde_picard(const FBSDEProblem& p, const PicardOptions& opts) {
  return picard_at_lambda(p, 1.0, opts, nullptr, 1.0);
}

FBSDESolution solve_fbsde_continuation(const FBSDEProblem& p,
                                       const std::vector<double>& lambda_steps,
                                       const PicardOptions& opts) {
  if (lambda_steps.size() < 2 || lambda_steps.front() != 0.0 || lambda_steps.back() != 1.0)
    fail(Errc::invalid_argument, "lambda schedule must increase from 0 to 1");
  for (std::size_t i = 1; i < lambda_steps.size(); ++i)
    if (lambda_steps[i] <= lambda_steps[i - 1])
      fail(Errc::invalid_argument, "lambda schedule must be strictly increasing");

  FBSDESolution cur = picard_at_lambda(p, 0.0, opts, nullptr, 0.0);
  std::vector<SweepRecord> history = cur.history;

  std::size_t idx = 1;
  double lambda_cur = 0.0;
  while (idx < lambda_steps.size()) {
    const double target = lambda_steps[idx];
    const double gap = target - lambda_steps[idx - 1];
    const double floor = gap / 64.0;
    double attempt = target;
    while (true) {
      FBSDESolution next = picard_at_lambda(p, attempt, opts, &cur, attempt);
      history.insert(history.end(), next.history.begin(), next.history.end());
      if (next.converged) {
        cur = std::move(next);
        lambda_cur = attempt;
        if (attempt == target) break;
        attempt = target;  // retry the full remaining step after a success
        continue;
      }
      const double inc = 0.5 * (attempt - lambda_cur);
      if (inc < floor) {
        cur = std::move(next);
        cur.step_floor_reached = true;
        cur.converged = false;
        cur.history = std::move(history);
        return cur;
      }
      attempt = lambda_cur + inc;
    }
    ++idx;
  }
  cur.history = std::move(history);
  return cur;
}

double fbsde_self_consistency(const FBSDEProblem& p, const FBSDESolution& sol) {
  PicardOptions opts;
  opts.damping = 1.0;
  opts.tol = 0.0;
  opts.max_iters = 1;
  opts.threads = p.bsde.threads;
  FBSDESolution probe = picard_at_lambda(p, 1.0, opts, &sol, 1.0);
  return probe.final_error;
}

double weighted_solution_distance(const FBSDESolution& a, const FBSDESolution& b, double kappa) {
  if (!(a.grid == b.grid) || a.ensembles.size() != b.ensembles.size())
    fail(Errc::grid_mismatch, "solutions not comparable");
  const int steps = a.grid.steps();
  double acc = 0.0;
  for (int k = 0; k <= steps; ++k) {
    double node = 0.0;
    for (std::size_t sc = 0; sc < a.ensembles.size(); ++sc) {
      const auto& ea = a.ensembles[sc];
      const auto& eb = b.ensembles[sc];
      ThetaBlock ta = a.theta_at(static_cast<int>(sc), k);
      ThetaBlock tb = b.theta_at(static_cast<int>(sc), k);
      node += ((ea.states[k] - eb.states[k]).squaredNorm() + (ta.Y - tb.Y).squaredNorm() +
               (ta.Z - tb.Z).squaredNorm() + (ta.Z0 - tb.Z0).squaredNorm()) /
              static_cast<double>(ea.states[k].rows());
    }
    node /= static_cast<double>(a.ensembles.size());
    acc += (k == 0 || k == steps ? 0.5 : 1.0) * std::exp(kappa * a.grid.node(k)) * node *
           a.grid.dt;
  }
  return acc;
}

DominationReport verify_domination_monotonicity(const FBSDEProblem& p,
                                                const MonotonicityFunctionals& fn, int samples,
                                                int block_size, std::uint64_t seed,
                                                double tolerance) {
  DominationReport rep;
  rep.samples = samples;
  rep.tolerance = tolerance;
  rep.worst_monotonicity_margin = std::numeric_limits<double>::infinity();
  rep.worst_domination_margin = std::numeric_limits<double>::infinity();

  const int n = p.dims.n, d = p.dims.d, d0 = p.dims.d0;
  rng::Key key = rng::Key(seed).child(rng::kUser, 0xD0);

  auto gaussian_block = [&](rng::Key k, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        m(r, c) = rng::normal(k, static_cast<std::uint64_t>(r) * cols + c);
    return m;
  };

  auto moments_of = [](const Eigen::MatrixXd& X, const ThetaBlock& th) {
    JointMoments jm;
    jm.x_mean = X.colwise().mean().transpose();
    jm.y_mean = th.Y.colwise().mean().transpose();
    jm.z_mean = th.Z.colwise().mean().transpose();
    jm.z0_mean = th.Z0.colwise().mean().transpose();
    return jm;
  };

  for (int it = 0; it < samples; ++it) {
    rng::Key sk = key.child(it);
    const double s =
        p.grid.t0 + rng::uniform(sk.child(0), 0) * (p.grid.T - p.grid.t0);
    const int regime = static_cast<int>(rng::uniform(sk.child(1), 0) * p.dims.m0);
    StepContext ctx{s, 0, 0, std::min(regime, p.dims.m0 - 1)};

    const Eigen::MatrixXd X = gaussian_block(sk.child(2), block_size, n);
    const Eigen::MatrixXd Xb = gaussian_block(sk.child(3), block_size, n);
    ThetaBlock th{gaussian_block(sk.child(4), block_size, n),
                  gaussian_block(sk.child(5), block_size, n * d),
                  gaussian_block(sk.child(6), block_size, n * d0)};
    ThetaBlock thb{gaussian_block(sk.child(7), block_size, n),
                   gaussian_block(sk.child(8), block_size, n * d),
                   gaussian_block(sk.child(9), block_size, n * d0)};

    const JointMoments jm = moments_of(X, th);
    const JointMoments jmb = moments_of(Xb, thb);

    auto eval = [&](const Eigen::MatrixXd& x, const ThetaBlock& t, const JointMoments& j) {
      struct Out {
        Eigen::MatrixXd f, b, sig, sig0;
      } o;
      o.f = p.cb.driver ? p.cb.driver(ctx, x, t, j) : Eigen::MatrixXd::Zero(x.rows(), n);
      o.b = p.cb.drift ? p.cb.drift(ctx, x, t, j) : Eigen::MatrixXd::Zero(x.rows(), n);
      o.sig = p.cb.diff_idio ? p.cb.diff_idio(ctx, x, t, j)
                             : Eigen::MatrixXd::Zero(x.rows(), n * d);
      o.sig0 = p.cb.diff_common ? p.cb.diff_common(ctx, x, t, j)
                                : Eigen::MatrixXd::Zero(x.rows(), n * d0);
      return o;
    };

    const auto at = eval(X, th, jm);
    const auto bt = eval(Xb, thb, jmb);

    const double inv_bs = 1.0 / static_cast<double>(block_size);
    const Eigen::MatrixXd dX = X - Xb;
    const Eigen::MatrixXd dY = th.Y - thb.Y;
    const Eigen::MatrixXd dZ = th.Z - thb.Z;
    const Eigen::MatrixXd dZ0 = th.Z0 - thb.Z0;

    double lhs = 0.0;
    lhs += -((at.f - bt.f).cwiseProduct(dX)).sum() * inv_bs;
    lhs += ((at.b - bt.b).cwiseProduct(dY)).sum() * inv_bs;
    lhs += ((at.sig - bt.sig).cwiseProduct(dZ)).sum() * inv_bs;
    lhs += ((at.sig0 - bt.sig0).cwiseProduct(dZ0)).sum() * inv_bs;
    lhs += (-0.5 * p.kappa_x + p.kappa_y) * (dX.cwiseProduct(dY)).sum() * inv_bs;

    const double varphi = fn.varphi ? fn.varphi(s, th, thb, jm, jmb, ctx.regime) : 0.0;
    const double mono_scale = fn.beta1_monotonicity >= 0.0 ? fn.beta1_monotonicity : fn.beta1;
    const double rhs = -mono_scale * varphi;
    DominationSample smp;
    smp.monotonicity_margin = rhs - lhs;

    // domination lines for b, sigma, sigma~: theta varies, x and its law fixed
    const JointMoments jm_mixed = [&] {
      JointMoments j = moments_of(X, thb);
      return j;
    }();
    const auto mixed = eval(X, thb, jm_mixed);
    double dom_lhs = std::max({((at.b - mixed.b).squaredNorm()) * inv_bs,
                               ((at.sig - mixed.sig).squaredNorm()) * inv_bs,
                               ((at.sig0 - mixed.sig0).squaredNorm()) * inv_bs});
    const double varphi_dom =
        fn.varphi ? fn.varphi(s, th, thb, jm, jm_mixed, ctx.regime) : 0.0;
    const double dom_rhs =
        fn.beta1 > 0.0 ? varphi_dom / fn.beta1 : std::numeric_limits<double>::infinity();
    smp.domination_margin = dom_rhs - dom_lhs;

    rep.worst_monotonicity_margin =
        std::min(rep.worst_monotonicity_margin, smp.monotonicity_margin);
    rep.worst_domination_margin = std::min(rep.worst_domination_margin, smp.domination_margin);
    if (smp.monotonicity_margin < -tolerance) ++rep.monotonicity_violations;
    if (smp.domination_margin < -tolerance) ++rep.domination_violations;
    rep.detail.push_back(smp);
  }
  rep.pass = rep.monotonicity_violations == 0 && rep.domination_violations == 0;
  return rep;
}

}  // namespace mfrs
