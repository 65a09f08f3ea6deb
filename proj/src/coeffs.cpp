#include "mfrs/coeffs.hpp"

#include <algorithm>
#include <cmath>

#include "mfrs/errors.hpp"

namespace mfrs {

namespace {

void require(bool ok, Errc code, const std::string& what) {
  if (!ok) fail(code, what);
}

void check_shape(const Eigen::MatrixXd& mat, long rows, long cols, const std::string& name) {
  require(mat.rows() == rows && mat.cols() == cols, Errc::dimension_mismatch,
          name + " has shape " + std::to_string(mat.rows()) + "x" + std::to_string(mat.cols()) +
              ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

void check_symmetric(const Eigen::MatrixXd& mat, double tol, const std::string& name) {
  require((mat - mat.transpose()).cwiseAbs().maxCoeff() <= tol, Errc::invalid_argument,
          name + " is not symmetric");
}

// Solves R x = rhs after verifying strict positive definiteness of R.
struct SpdSolver {
  Eigen::LLT<Eigen::MatrixXd> llt;
  SpdSolver(const Eigen::MatrixXd& R, Errc code, const std::string& name) : llt(R) {
    if (llt.info() != Eigen::Success || lambda_min_sym(R) <= 0.0)
      fail(code, name + " is not positive definite");
  }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const { return llt.solve(rhs); }
};

}  // namespace

double lambda_max_sym(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

double lambda_min_sym(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

double spectral_norm(const Eigen::MatrixXd& any) {
  if (any.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(any);
  return svd.singularValues()(0);
}

LQBlocks LQBlocks::zero(const Dims& dm) {
  LQBlocks blk;
  blk.A = Eigen::MatrixXd::Zero(dm.n, dm.n);
  blk.Abar = blk.A;
  blk.B = Eigen::MatrixXd::Zero(dm.n, dm.m);
  blk.Bbar = blk.B;
  blk.C = Eigen::MatrixXd::Zero(dm.n * dm.d, dm.n);
  blk.Cbar = blk.C;
  blk.D = Eigen::MatrixXd::Zero(dm.n * dm.d, dm.m);
  blk.Dbar = blk.D;
  blk.M = Eigen::MatrixXd::Zero(dm.n * dm.d0, dm.n);
  blk.Mbar = blk.M;
  blk.N = Eigen::MatrixXd::Zero(dm.n * dm.d0, dm.m);
  blk.Nbar = blk.N;
  blk.Q = Eigen::MatrixXd::Zero(dm.n, dm.n);
  blk.Qbar = blk.Q;
  blk.S = Eigen::MatrixXd::Zero(dm.m, dm.n);
  blk.Sbar = blk.S;
  blk.R = Eigen::MatrixXd::Zero(dm.m, dm.m);
  blk.Rbar = blk.R;
  blk.b = Eigen::VectorXd::Zero(dm.n);
  blk.sigma = Eigen::VectorXd::Zero(dm.n * dm.d);
  blk.gamma = Eigen::VectorXd::Zero(dm.n * dm.d0);
  blk.q = Eigen::VectorXd::Zero(dm.n);
  blk.qbar = blk.q;
  blk.r = Eigen::VectorXd::Zero(dm.m);
  blk.rbar = blk.r;
  return blk;
}

int LQCoefficients::piece_index(double s) const {
  int idx = 0;
  for (int p = 1; p < pieces(); ++p)
    if (s >= breakpoints[p]) idx = p;
  return idx;
}

int TransformedCoefficients::piece_index(double s) const {
  int idx = 0;
  for (std::size_t p = 1; p < breakpoints.size(); ++p)
    if (s >= breakpoints[p]) idx = static_cast<int>(p);
  return idx;
}

int GameTransformedCoefficients::piece_index(double s) const {
  int idx = 0;
  for (std::size_t p = 1; p < breakpoints.size(); ++p)
    if (s >= breakpoints[p]) idx = static_cast<int>(p);
  return idx;
}

void LQCoefficients::validate(double sym_tol) const {
  require(dims.n >= 1 && dims.m >= 1 && dims.d >= 1 && dims.d0 >= 1 && dims.m0 >= 1,
          Errc::invalid_argument, "all dimensions must be at least 1");
  require(!breakpoints.empty(), Errc::invalid_argument, "at least one breakpoint required");
  for (std::size_t p = 1; p < breakpoints.size(); ++p)
    require(breakpoints[p] > breakpoints[p - 1], Errc::invalid_argument,
            "breakpoints must be strictly increasing");
  require(static_cast<int>(blocks.size()) == dims.m0, Errc::dimension_mismatch,
          "blocks must have one entry per regime");
  for (int i = 0; i < dims.m0; ++i) {
    require(static_cast<int>(blocks[i].size()) == pieces(), Errc::dimension_mismatch,
            "blocks must have one entry per breakpoint");
    for (int p = 0; p < pieces(); ++p) {
      const auto& blk = blocks[i][p];
      const std::string tag = " (regime " + std::to_string(i) + ", piece " + std::to_string(p) + ")";
      check_shape(blk.A, dims.n, dims.n, "A" + tag);
      check_shape(blk.Abar, dims.n, dims.n, "Abar" + tag);
      check_shape(blk.B, dims.n, dims.m, "B" + tag);
      check_shape(blk.Bbar, dims.n, dims.m, "Bbar" + tag);
      check_shape(blk.C, dims.n * dims.d, dims.n, "C" + tag);
      check_shape(blk.Cbar, dims.n * dims.d, dims.n, "Cbar" + tag);
      check_shape(blk.D, dims.n * dims.d, dims.m, "D" + tag);
      check_shape(blk.Dbar, dims.n * dims.d, dims.m, "Dbar" + tag);
      check_shape(blk.M, dims.n * dims.d0, dims.n, "M" + tag);
      check_shape(blk.Mbar, dims.n * dims.d0, dims.n, "Mbar" + tag);
      check_shape(blk.N, dims.n * dims.d0, dims.m, "N" + tag);
      check_shape(blk.Nbar, dims.n * dims.d0, dims.m, "Nbar" + tag);
      check_shape(blk.Q, dims.n, dims.n, "Q" + tag);
      check_shape(blk.Qbar, dims.n, dims.n, "Qbar" + tag);
      check_shape(blk.S, dims.m, dims.n, "S" + tag);
      check_shape(blk.Sbar, dims.m, dims.n, "Sbar" + tag);
      check_shape(blk.R, dims.m, dims.m, "R" + tag);
      check_shape(blk.Rbar, dims.m, dims.m, "Rbar" + tag);
      check_symmetric(blk.Q, sym_tol, "Q" + tag);
      check_symmetric(blk.Qbar, sym_tol, "Qbar" + tag);
      check_symmetric(blk.R, sym_tol, "R" + tag);
      check_symmetric(blk.Rbar, sym_tol, "Rbar" + tag);
      require(blk.b.size() == dims.n && blk.q.size() == dims.n && blk.qbar.size() == dims.n,
              Errc::dimension_mismatch, "b/q/qbar length mismatch" + tag);
      require(blk.sigma.size() == dims.n * dims.d, Errc::dimension_mismatch,
              "sigma length mismatch" + tag);
      require(blk.gamma.size() == dims.n * dims.d0, Errc::dimension_mismatch,
              "gamma length mismatch" + tag);
      require(blk.r.size() == dims.m && blk.rbar.size() == dims.m, Errc::dimension_mismatch,
              "r/rbar length mismatch" + tag);
    }
  }
}

LQCoefficients LQCoefficients::constant(const Dims& dims, double kappa_star,
                                        const std::vector<LQBlocks>& per_regime, double t0) {
  LQCoefficients c;
  c.dims = dims;
  c.kappa_star = kappa_star;
  c.breakpoints = {t0};
  for (const auto& blk : per_regime) c.blocks.push_back({blk});
  c.validate();
  return c;
}

void GameCoefficients::validate() const {
  base.validate();
  require(static_cast<int>(S1bar.size()) == base.dims.m0 &&
              static_cast<int>(S2bar.size()) == base.dims.m0,
          Errc::dimension_mismatch, "S1bar/S2bar must have one entry per regime");
  for (int i = 0; i < base.dims.m0; ++i) {
    require(static_cast<int>(S1bar[i].size()) == base.pieces() &&
                static_cast<int>(S2bar[i].size()) == base.pieces(),
            Errc::dimension_mismatch, "S1bar/S2bar must have one entry per breakpoint");
    for (int p = 0; p < base.pieces(); ++p) {
      check_shape(S1bar[i][p], base.dims.m, base.dims.n, "S1bar");
      check_shape(S2bar[i][p], base.dims.m, base.dims.n, "S2bar");
    }
  }
}

TransformedCoefficients eliminate_cross_terms(const LQCoefficients& c) {
  c.validate();
  TransformedCoefficients tc;
  tc.dims = c.dims;
  tc.breakpoints = c.breakpoints;
  tc.blocks.resize(c.dims.m0);
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      SpdSolver rinv(blk.R, Errc::r_not_invertible, "R");
      SpdSolver rsum(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");

      const Eigen::MatrixXd RinvS = rinv.solve(blk.S);
      const Eigen::MatrixXd Rinvr = rinv.solve(blk.r);
      const Eigen::MatrixXd Ssum = blk.S + blk.Sbar;
      const Eigen::MatrixXd RsumSsum = rsum.solve(Ssum);
      const Eigen::MatrixXd Rsumrsum = rsum.solve(blk.r + blk.rbar);

      TransformedBlocks out;
      out.sA = blk.A - blk.B * RinvS;
      out.sAbar = blk.Abar + blk.B * RinvS - (blk.B + blk.Bbar) * RsumSsum;
      out.sC = blk.C - blk.D * RinvS;
      out.sCbar = blk.Cbar + blk.D * RinvS - (blk.D + blk.Dbar) * RsumSsum;
      out.sM = blk.M - blk.N * RinvS;
      out.sMbar = blk.Mbar + blk.N * RinvS - (blk.N + blk.Nbar) * RsumSsum;
      out.sQ = blk.Q - blk.S.transpose() * RinvS;
      out.sQbar = blk.Qbar + blk.S.transpose() * RinvS - Ssum.transpose() * RsumSsum;
      out.sq = blk.q - blk.S.transpose() * Rinvr;
      out.sqbar = blk.qbar + blk.S.transpose() * Rinvr - Ssum.transpose() * Rsumrsum;
      tc.blocks[i].push_back(std::move(out));
    }
  }
  return tc;
}

GameTransformedCoefficients game_transformed_coefficients(const GameCoefficients& g) {
  g.validate();
  const auto& c = g.base;
  GameTransformedCoefficients tc;
  tc.dims = c.dims;
  tc.breakpoints = c.breakpoints;
  tc.blocks.resize(c.dims.m0);
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      const auto& S1 = g.S1bar[i][p];
      const auto& S2 = g.S2bar[i][p];
      SpdSolver rinv(blk.R, Errc::r_not_invertible, "R");
      SpdSolver rsum(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");

      const Eigen::MatrixXd RinvS = rinv.solve(blk.S);
      const Eigen::MatrixXd RsumS1 = rsum.solve(blk.S + S1);
      const Eigen::MatrixXd RsumS2 = rsum.solve(blk.S + S2);

      GameTransformedBlocks out;
      out.sA = blk.A - blk.B * RinvS;
      out.sC = blk.C - blk.D * RinvS;
      out.sM = blk.M - blk.N * RinvS;
      out.sQ = blk.Q - blk.S.transpose() * RinvS;
      out.tA = blk.Abar + blk.B * RinvS - (blk.B + blk.Bbar) * RsumS1;
      out.tC = blk.Cbar + blk.D * RinvS - (blk.D + blk.Dbar) * RsumS1;
      out.tM = blk.Mbar + blk.N * RinvS - (blk.N + blk.Nbar) * RsumS1;
      out.tQ = blk.Qbar + blk.S.transpose() * RinvS - (blk.S + S2).transpose() * RsumS1;
      out.bbA = blk.B * RinvS - blk.B * RsumS2;
      out.bbC = blk.D * RinvS - blk.D * RsumS2;
      out.bbM = blk.N * RinvS - blk.N * RsumS2;
      tc.blocks[i].push_back(std::move(out));
    }
  }
  return tc;
}

Eigen::MatrixXd transform_control(const LQCoefficients& c, double s, int regime,
                                  const Eigen::MatrixXd& X, const Eigen::VectorXd& EX,
                                  const Eigen::MatrixXd& u) {
  const auto& blk = c.at(regime, s);
  SpdSolver rinv(blk.R, Errc::r_not_invertible, "R");
  SpdSolver rsum(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
  const Eigen::MatrixXd RinvS = rinv.solve(blk.S);
  const Eigen::MatrixXd RsumSsum = rsum.solve(blk.S + blk.Sbar);
  Eigen::MatrixXd centered = X.rowwise() - EX.transpose();
  Eigen::MatrixXd out = u + centered * RinvS.transpose();
  out.rowwise() += (RsumSsum * EX).transpose();
  return out;
}

Eigen::MatrixXd untransform_control(const LQCoefficients& c, double s, int regime,
                                    const Eigen::MatrixXd& X, const Eigen::VectorXd& EX,
                                    const Eigen::MatrixXd& u_transformed) {
  const auto& blk = c.at(regime, s);
  SpdSolver rinv(blk.R, Errc::r_not_invertible, "R");
  SpdSolver rsum(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
  const Eigen::MatrixXd RinvS = rinv.solve(blk.S);
  const Eigen::MatrixXd RsumSsum = rsum.solve(blk.S + blk.Sbar);
  Eigen::MatrixXd centered = X.rowwise() - EX.transpose();
  Eigen::MatrixXd out = u_transformed - centered * RinvS.transpose();
  out.rowwise() -= (RsumSsum * EX).transpose();
  return out;
}

KappaBounds compute_kappa_bounds(const TransformedCoefficients& tc, double kappa,
                                 double kappa_star) {
  KappaBounds kb;
  double kx = -std::numeric_limits<double>::infinity();
  double kxmu = kx, ay = kx, aynu = kx, K = kx;
  for (const auto& per_regime : tc.blocks) {
    for (const auto& blk : per_regime) {
      const Eigen::MatrixXd AsymX = blk.sA + blk.sA.transpose() +
                                    blk.sC.transpose() * blk.sC + blk.sM.transpose() * blk.sM;
      kx = std::max(kx, lambda_max_sym(AsymX));
      const Eigen::MatrixXd Csum = blk.sC + blk.sCbar;
      const Eigen::MatrixXd Msum = blk.sM + blk.sMbar;
      const Eigen::MatrixXd Mu = blk.sAbar + blk.sAbar.transpose() + Csum.transpose() * Csum -
                                 blk.sC.transpose() * blk.sC + Msum.transpose() * Msum -
                                 blk.sM.transpose() * blk.sM;
      kxmu = std::max(kxmu, lambda_max_sym(Mu));
      ay = std::max(ay, lambda_max_sym(blk.sA + blk.sA.transpose()));
      aynu = std::max(aynu, lambda_max_sym(blk.sAbar + blk.sAbar.transpose()));
      double sq = spectral_norm(blk.sQ), sc = spectral_norm(blk.sC), sm = spectral_norm(blk.sM);
      double bars = std::max({spectral_norm(blk.sQbar), spectral_norm(blk.sCbar),
                              spectral_norm(blk.sMbar)});
      K = std::max(K, sq * sq + sc * sc + sm * sm + bars * bars);
    }
  }
  kb.kappa_x = kx;
  kb.kappa_xmu = kxmu;
  kb.kappa_y = kappa + 0.5 * ay;
  kb.kappa_ynu = 0.5 * aynu;
  kb.K = K;
  kb.kappa_bar = std::min(-kb.kappa_x - (kb.kappa_xmu > 0.0 ? kb.kappa_xmu : 0.0), kappa_star);
  kb.kappa_under = 2.0 * (kb.kappa_y + (kb.kappa_ynu > 0.0 ? kb.kappa_ynu : 0.0) + kb.K);
  kb.feasible_kappa = -0.5 * kb.kappa_x + kb.kappa_y;
  kb.window_ok = kb.feasible_kappa > kb.kappa_under && kb.feasible_kappa < kb.kappa_bar;
  return kb;
}

KappaBounds compute_game_kappa_bounds(const GameCoefficients& g, double kappa,
                                      double kappa_star) {
  const auto tc = game_transformed_coefficients(g);
  KappaBounds kb;
  double kx = -std::numeric_limits<double>::infinity();
  double kxnu = kx, ay = kx, aynu = kx, K = kx;
  for (const auto& per_regime : tc.blocks) {
    for (const auto& blk : per_regime) {
      const Eigen::MatrixXd AsymX = blk.sA + blk.sA.transpose() +
                                    blk.sC.transpose() * blk.sC + blk.sM.transpose() * blk.sM;
      kx = std::max(kx, lambda_max_sym(AsymX));
      const Eigen::MatrixXd Csum = blk.sC + blk.tC;
      const Eigen::MatrixXd Msum = blk.sM + blk.tM;
      const Eigen::MatrixXd Nu = blk.tA + blk.tA.transpose() + Csum.transpose() * Csum -
                                 blk.sC.transpose() * blk.sC + Msum.transpose() * Msum -
                                 blk.sM.transpose() * blk.sM;
      kxnu = std::max(kxnu, lambda_max_sym(Nu));
      ay = std::max(ay, lambda_max_sym(blk.sA + blk.sA.transpose()));
      aynu = std::max(aynu, lambda_max_sym(blk.bbA + blk.bbA.transpose()));
      double sq = spectral_norm(blk.sQ), sc = spectral_norm(blk.sC), sm = spectral_norm(blk.sM);
      double extra = std::max({spectral_norm(blk.tQ), spectral_norm(blk.bbC),
                               spectral_norm(blk.bbM)});
      K = std::max(K, sq * sq + sc * sc + sm * sm + extra * extra);
    }
  }
  kb.kappa_x = kx;
  kb.kappa_xmu = kxnu;
  kb.kappa_y = kappa + 0.5 * ay;
  kb.kappa_ynu = 0.5 * aynu;
  kb.K = K;
  kb.kappa_bar = std::min(-kb.kappa_x - (kb.kappa_xmu > 0.0 ? kb.kappa_xmu : 0.0), kappa_star);
  kb.kappa_under = 2.0 * (kb.kappa_y + (kb.kappa_ynu > 0.0 ? kb.kappa_ynu : 0.0) + kb.K);
  kb.feasible_kappa = -0.5 * kb.kappa_x + kb.kappa_y;
  kb.window_ok = kb.feasible_kappa > kb.kappa_under && kb.feasible_kappa < kb.kappa_bar;
  return kb;
}

namespace {

BlockCheck eig_check(const std::string& name, int regime, int piece, const Eigen::MatrixXd& sym,
                     double floor) {
  BlockCheck chk;
  chk.name = name;
  chk.regime = regime;
  chk.piece = piece;
  chk.min_eigenvalue = lambda_min_sym(sym);
  chk.pass = chk.min_eigenvalue >= floor;
  return chk;
}

Eigen::MatrixXd stack_blocks(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& Stop,
                             const Eigen::MatrixXd& Sbottom, const Eigen::MatrixXd& R) {
  Eigen::MatrixXd out(Q.rows() + Sbottom.rows(), Q.cols() + Stop.cols());
  out.topLeftCorner(Q.rows(), Q.cols()) = Q;
  out.topRightCorner(Stop.rows(), Stop.cols()) = Stop;
  out.bottomLeftCorner(Sbottom.rows(), Sbottom.cols()) = Sbottom;
  out.bottomRightCorner(R.rows(), R.cols()) = R;
  return out;
}

}  // namespace

PDReport check_positive_definiteness(const LQCoefficients& c, double delta) {
  c.validate();
  PDReport rep;
  rep.delta = delta;
  rep.pass = true;
  const double psd_floor = -1e-10;
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      rep.checks.push_back(eig_check("R", i, p, blk.R, delta));
      rep.checks.push_back(eig_check("R+Rbar", i, p, blk.R + blk.Rbar, delta));
      rep.checks.push_back(eig_check(
          "[[Q,S^T],[S,R]]", i, p, stack_blocks(blk.Q, blk.S.transpose(), blk.S, blk.R),
          psd_floor));
      const Eigen::MatrixXd Ssum = blk.S + blk.Sbar;
      rep.checks.push_back(eig_check(
          "[[Q+Qbar,(S+Sbar)^T],[S+Sbar,R+Rbar]]", i, p,
          stack_blocks(blk.Q + blk.Qbar, Ssum.transpose(), Ssum, blk.R + blk.Rbar), psd_floor));
    }
  }
  for (const auto& chk : rep.checks) {
    if (!chk.pass) {
      rep.pass = false;
      if (rep.first_failure.empty())
        rep.first_failure = chk.name + " (regime " + std::to_string(chk.regime) + ", piece " +
                            std::to_string(chk.piece) +
                            "), min eigenvalue = " + std::to_string(chk.min_eigenvalue);
    }
  }
  return rep;
}

GameStructureReport check_game_structure(const GameCoefficients& g, double tol, double delta) {
  g.validate();
  const auto& c = g.base;
  GameStructureReport rep;
  rep.bar_blocks_zero = true;
  rep.scaling_ok = true;
  rep.cross_identity_ok = true;

  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      double zero_err = std::max({blk.Abar.cwiseAbs().maxCoeff(), blk.Cbar.cwiseAbs().maxCoeff(),
                                  blk.Mbar.cwiseAbs().maxCoeff()});
      if (zero_err > tol) rep.bar_blocks_zero = false;
      double scale_err = std::max({(blk.Bbar - g.k * blk.B).cwiseAbs().maxCoeff(),
                                   (blk.Dbar - g.k * blk.D).cwiseAbs().maxCoeff(),
                                   (blk.Nbar - g.k * blk.N).cwiseAbs().maxCoeff()});
      rep.worst_scaling_error = std::max(rep.worst_scaling_error, scale_err);
      if (scale_err > tol) rep.scaling_ok = false;
      const Eigen::MatrixXd identity =
          g.k * blk.S + (g.k + 1.0) * g.S1bar[i][p] - g.S2bar[i][p];
      double id_err = identity.cwiseAbs().maxCoeff();
      rep.worst_identity_error = std::max(rep.worst_identity_error, id_err);
      if (id_err > tol) rep.cross_identity_ok = false;
    }
  }

  // (PD)_G: asymmetric off-diagonal block tested via its symmetric part.
  rep.pd.delta = delta;
  rep.pd.pass = true;
  const double psd_floor = -1e-10;
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      rep.pd.checks.push_back(eig_check("R", i, p, blk.R, delta));
      rep.pd.checks.push_back(eig_check("R+Rbar", i, p, blk.R + blk.Rbar, delta));
      rep.pd.checks.push_back(eig_check(
          "[[Q,S^T],[S,R]]", i, p, stack_blocks(blk.Q, blk.S.transpose(), blk.S, blk.R),
          psd_floor));
      const Eigen::MatrixXd block =
          stack_blocks(blk.Q + blk.Qbar, (blk.S + g.S2bar[i][p]).transpose(),
                       blk.S + g.S1bar[i][p], blk.R + blk.Rbar);
      const Eigen::MatrixXd sym = 0.5 * (block + block.transpose());
      rep.pd.checks.push_back(eig_check("sym[[Q+Qbar,(S+S2bar)^T],[S+S1bar,R+Rbar]]", i, p, sym,
                                        psd_floor));
    }
  }
  for (const auto& chk : rep.pd.checks) {
    if (!chk.pass) {
      rep.pd.pass = false;
      if (rep.pd.first_failure.empty())
        rep.pd.first_failure = chk.name + " (regime " + std::to_string(chk.regime) + ", piece " +
                               std::to_string(chk.piece) +
                               "), min eigenvalue = " + std::to_string(chk.min_eigenvalue);
    }
  }

  rep.pass = rep.bar_blocks_zero && rep.scaling_ok && rep.cross_identity_ok && rep.pd.pass;
  if (!rep.pass) {
    if (!rep.bar_blocks_zero)
      rep.first_failure = "(S1)-(i): Abar, Cbar, Mbar must vanish";
    else if (!rep.scaling_ok)
      rep.first_failure = "(S1)-(ii): Bbar = k B, Dbar = k D, Nbar = k N violated";
    else if (!rep.cross_identity_ok)
      rep.first_failure = "(S2)-(ii): k S + (k+1) S1bar - S2bar = 0 violated";
    else
      rep.first_failure = "(PD)_G: " + rep.pd.first_failure;
  }
  return rep;
}

namespace {

TheoremFunctionals functionals_impl(const LQCoefficients& c,
                                    const std::vector<std::vector<Eigen::MatrixXd>>* S1,
                                    double k, bool game) {
  TheoremFunctionals tf;
  double L1 = 0.0;
  double minR = std::numeric_limits<double>::infinity();
  double minRsum = minR;
  for (int i = 0; i < c.dims.m0; ++i) {
    for (int p = 0; p < c.pieces(); ++p) {
      const auto& blk = c.blocks[i][p];
      SpdSolver rinv(blk.R, Errc::r_not_invertible, "R");
      SpdSolver rsum(blk.R + blk.Rbar, Errc::rbar_sum_not_invertible, "R + Rbar");
      const Eigen::MatrixXd Rinv = rinv.solve(Eigen::MatrixXd::Identity(c.dims.m, c.dims.m));
      const Eigen::MatrixXd Rsuminv =
          rsum.solve(Eigen::MatrixXd::Identity(c.dims.m, c.dims.m));
      auto nrm2 = [](const Eigen::MatrixXd& mat) {
        double s = spectral_norm(mat);
        return s * s;
      };
      L1 = std::max({L1, nrm2(blk.B * Rinv), nrm2(blk.D * Rinv), nrm2(blk.N * Rinv),
                     nrm2((blk.B + blk.Bbar) * Rsuminv), nrm2((blk.D + blk.Dbar) * Rsuminv),
                     nrm2((blk.N + blk.Nbar) * Rsuminv)});
      minR = std::min(minR, lambda_min_sym(Rinv));
      minRsum = std::min(minRsum, lambda_min_sym(Rsuminv));
    }
  }
  (void)S1;
  tf.L1 = 2.0 * L1;
  if (!game) {
    tf.L2 = std::min(minR, minRsum);
  } else if (k == -1.0) {
    tf.L2 = 4.0 * minR;
  } else {
    tf.L2 = std::min(minR, (k + 1.0) * minRsum);
  }
  tf.beta1 = std::min(1.0 / tf.L1, tf.L2);
  if (tf.L1 == 0.0) tf.beta1 = tf.L2;  // no control channels: 1/L1 = +inf
  return tf;
}

}  // namespace

TheoremFunctionals control_theorem_functionals(const LQCoefficients& c) {
  return functionals_impl(c, nullptr, 0.0, false);
}

TheoremFunctionals game_theorem_functionals(const GameCoefficients& g) {
  return functionals_impl(g.base, &g.S1bar, g.k, true);
}

}  // namespace mfrs
