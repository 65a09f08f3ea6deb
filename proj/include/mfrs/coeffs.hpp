#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace mfrs {

struct Dims {
  int n = 1;   // state
  int m = 1;   // control
  int d = 1;   // idiosyncratic noise
  int d0 = 1;  // common noise
  int m0 = 1;  // regimes
};

// One piecewise-constant segment of the LQ data for one regime.
// Diffusion blocks are stacked column blocks: C is (n*d) x n, row block j
// being the loading of the j-th idiosyncratic noise component.
struct LQBlocks {
  Eigen::MatrixXd A, Abar;  // n x n
  Eigen::MatrixXd B, Bbar;  // n x m
  Eigen::MatrixXd C, Cbar;  // (n*d) x n
  Eigen::MatrixXd D, Dbar;  // (n*d) x m
  Eigen::MatrixXd M, Mbar;  // (n*d0) x n
  Eigen::MatrixXd N, Nbar;  // (n*d0) x m
  Eigen::MatrixXd Q, Qbar;  // n x n, symmetric
  Eigen::MatrixXd S, Sbar;  // m x n
  Eigen::MatrixXd R, Rbar;  // m x m, symmetric
  Eigen::VectorXd b, sigma, gamma;  // n, n*d, n*d0
  Eigen::VectorXd q, qbar;          // n
  Eigen::VectorXd r, rbar;          // m

  static LQBlocks zero(const Dims& dims);
};

struct LQCoefficients {
  Dims dims;
  double kappa_star = 0.0;
  std::vector<double> breakpoints;            // strictly increasing piece start times
  std::vector<std::vector<LQBlocks>> blocks;  // [regime][piece]

  int pieces() const { return static_cast<int>(breakpoints.size()); }
  int piece_index(double s) const;
  const LQBlocks& at(int regime, double s) const { return blocks[regime][piece_index(s)]; }

  void validate(double sym_tol = 1e-10) const;

  // Single-piece constructor used throughout the tests.
  static LQCoefficients constant(const Dims& dims, double kappa_star,
                                 const std::vector<LQBlocks>& per_regime, double t0 = 0.0);
};

struct GameCoefficients {
  LQCoefficients base;                             // Sbar fields unused (kept zero)
  std::vector<std::vector<Eigen::MatrixXd>> S1bar; // [regime][piece], m x n
  std::vector<std::vector<Eigen::MatrixXd>> S2bar; // [regime][piece], m x n
  double k = 0.0;                                  // structure constant of (S1)-(ii)

  void validate() const;
};

// Script blocks of the cross-term elimination, per [regime][piece].
struct TransformedBlocks {
  Eigen::MatrixXd sA, sAbar;
  Eigen::MatrixXd sC, sCbar;
  Eigen::MatrixXd sM, sMbar;
  Eigen::MatrixXd sQ, sQbar;
  Eigen::VectorXd sq, sqbar;
};

struct TransformedCoefficients {
  Dims dims;
  std::vector<double> breakpoints;
  std::vector<std::vector<TransformedBlocks>> blocks;

  int piece_index(double s) const;
  const TransformedBlocks& at(int regime, double s) const {
    return blocks[regime][piece_index(s)];
  }
};

// Game analogue: script blocks plus the tilde and blackboard blocks entering
// the equilibrium system.
struct GameTransformedBlocks {
  Eigen::MatrixXd sA, sC, sM, sQ;  // same script blocks as the control case
  Eigen::MatrixXd tA, tC, tM;      // tilde blocks (coefficients of E0[X])
  Eigen::MatrixXd tQ;              // tilde Q
  Eigen::MatrixXd bbA, bbC, bbM;   // blackboard blocks (coefficients of E0[theta])
};

struct GameTransformedCoefficients {
  Dims dims;
  std::vector<double> breakpoints;
  std::vector<std::vector<GameTransformedBlocks>> blocks;

  int piece_index(double s) const;
  const GameTransformedBlocks& at(int regime, double s) const {
    return blocks[regime][piece_index(s)];
  }
};

struct KappaBounds {
  double kappa_x = 0.0;
  double kappa_xmu = 0.0;
  double kappa_y = 0.0;
  double kappa_ynu = 0.0;
  double K = 0.0;
  double kappa_bar = 0.0;
  double kappa_under = 0.0;
  double feasible_kappa = 0.0;  // -kappa_x/2 + kappa_y
  bool window_ok = false;
};

struct BlockCheck {
  std::string name;
  int regime = 0;
  int piece = 0;
  double min_eigenvalue = 0.0;
  bool pass = false;
};

struct PDReport {
  bool pass = false;
  double delta = 0.0;  // strictness floor used for the R blocks
  std::vector<BlockCheck> checks;
  std::string first_failure;
};

struct GameStructureReport {
  bool pass = false;
  bool bar_blocks_zero = false;      // (S1)-(i)
  bool scaling_ok = false;           // (S1)-(ii)
  bool cross_identity_ok = false;    // (S2)-(ii)
  PDReport pd;                       // (PD)_G
  double worst_scaling_error = 0.0;
  double worst_identity_error = 0.0;
  std::string first_failure;
};

// Constants of the verification functionals in the solvability theorems.
struct TheoremFunctionals {
  double L1 = 0.0;
  double L2 = 0.0;
  double beta1 = 0.0;
};

double lambda_max_sym(const Eigen::MatrixXd& sym);
double lambda_min_sym(const Eigen::MatrixXd& sym);
double spectral_norm(const Eigen::MatrixXd& any);

TransformedCoefficients eliminate_cross_terms(const LQCoefficients& c);

GameTransformedCoefficients game_transformed_coefficients(const GameCoefficients& g);

// u -> u + R^{-1} S (X - E0[X]) + (R+Rbar)^{-1} (S+Sbar) E0[X], rowwise per
// particle. X rows are particle states, u rows the matching controls.
Eigen::MatrixXd transform_control(const LQCoefficients& c, double s, int regime,
                                  const Eigen::MatrixXd& X, const Eigen::VectorXd& EX,
                                  const Eigen::MatrixXd& u);
Eigen::MatrixXd untransform_control(const LQCoefficients& c, double s, int regime,
                                    const Eigen::MatrixXd& X, const Eigen::VectorXd& EX,
                                    const Eigen::MatrixXd& u_transformed);

KappaBounds compute_kappa_bounds(const TransformedCoefficients& tc, double kappa,
                                 double kappa_star);

KappaBounds compute_game_kappa_bounds(const GameCoefficients& g, double kappa,
                                      double kappa_star);

PDReport check_positive_definiteness(const LQCoefficients& c, double delta = 1e-8);

GameStructureReport check_game_structure(const GameCoefficients& g, double tol = 1e-10,
                                         double delta = 1e-8);

TheoremFunctionals control_theorem_functionals(const LQCoefficients& c);
TheoremFunctionals game_theorem_functionals(const GameCoefficients& g);

}  // namespace mfrs
