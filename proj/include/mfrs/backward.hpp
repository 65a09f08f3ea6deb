#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "mfrs/forward.hpp"

namespace mfrs {

// Per-particle backward values at one node.
struct ThetaBlock {
  Eigen::MatrixXd Y;   // N x n
  Eigen::MatrixXd Z;   // N x (n*d),  flattened column-major like the forward diffusions
  Eigen::MatrixXd Z0;  // N x (n*d0)
};

// Within-scenario means of the joint (X, Theta) cloud.
struct JointMoments {
  Eigen::VectorXd x_mean;
  Eigen::VectorXd y_mean;
  Eigen::VectorXd z_mean;
  Eigen::VectorXd z0_mean;
};

// Driver f(s, x, theta, law, regime), vectorized over particles -> N x n.
using DriverCallback =
    std::function<Eigen::MatrixXd(double s, const Eigen::MatrixXd& X, const ThetaBlock& theta,
                                  const JointMoments& law, int regime)>;

// Step context for callers that need scenario-level inhomogeneities.
struct StepContext {
  double s = 0.0;
  int node = 0;
  int scenario = 0;
  int regime = 0;
};

using CtxDriverCallback =
    std::function<Eigen::MatrixXd(const StepContext&, const Eigen::MatrixXd& X,
                                  const ThetaBlock& theta, const JointMoments& law)>;

// Regression basis: polynomials in the particle state up to x_degree,
// optionally tensored with the within-scenario mean (the carrier of the
// conditional law), all per regime. Columns are ordered
// [1 | x | m | x ox x | x ox m | m ox m] so downgrade levels are prefixes.
struct RegressionBasisSpec {
  int x_degree = 2;
  int mean_degree = 2;
  double condition_threshold = 1e10;
  // Pool all regimes into one regression group. Valid when every regime
  // carries identical coefficients; makes results independent of the
  // generator in that case.
  bool pool_regimes = false;
};

int basis_size(const RegressionBasisSpec& spec, int n, int level);
int basis_levels(const RegressionBasisSpec& spec);
// psi: N x basis_size(level_max); evaluated on all levels' columns.
Eigen::MatrixXd eval_basis(const RegressionBasisSpec& spec, const Eigen::MatrixXd& X,
                           const Eigen::VectorXd& mean);

// Fitted functional representation of Theta on the grid: basis coefficients
// per node and regime (zero-padded to the full basis when downgraded).
struct ThetaFit {
  RegressionBasisSpec basis;
  int n = 1, d = 1, d0 = 1, m0 = 1;
  int nodes = 0;
  bool pooled = false;  // fits stored under regime slot 0
  std::vector<std::vector<Eigen::MatrixXd>> coefY;   // [node][regime]: bs x n
  std::vector<std::vector<Eigen::MatrixXd>> coefZ;   // [node][regime]: bs x (n*d)
  std::vector<std::vector<Eigen::MatrixXd>> coefZ0;  // [node][regime]: bs x (n*d0)
  std::vector<std::vector<Eigen::VectorXd>> coefK;   // [node][i*m0+j]: length n
  // training hull per node and regime; evaluation clamps its inputs to a
  // slightly inflated copy so polynomial extrapolation stays bounded
  std::vector<std::vector<Eigen::VectorXd>> range_lo, range_hi;

  void allocate(const RegressionBasisSpec& spec, int n_, int d_, int d0_, int m0_, int nodes_);
  ThetaBlock evaluate(int node, int regime, const Eigen::MatrixXd& X,
                      const Eigen::VectorXd& mean) const;
  // th_damp * fresh + (1 - th_damp) * *this, in place; ranges take the union.
  void blend_from(const ThetaFit& fresh, double th_damp);
};

struct RegressionDiagnostics {
  double max_condition = 0.0;
  double min_r_squared = 1.0;
  bool basis_downgraded = false;
};

struct BackwardSolution {
  TimeGrid grid;
  int n = 1, d = 1, d0 = 1, m0 = 1;
  std::vector<std::vector<Eigen::MatrixXd>> Y;   // [scenario][node]: N x n
  std::vector<std::vector<Eigen::MatrixXd>> Z;   // [scenario][node]: N x (n*d)
  std::vector<std::vector<Eigen::MatrixXd>> Z0;  // [scenario][node]: N x (n*d0)
  std::vector<std::vector<Eigen::VectorXd>> K;   // [node][i*m0+j]: length n loadings
  ThetaFit fit;
  RegressionDiagnostics diagnostics;

  double mean_sq_y(int node) const;  // E|Y|^2 across scenarios and particles
};

struct BsdeOptions {
  RegressionBasisSpec basis;
  int picard_inner = 1;           // fixed-point sweeps for the implicit-in-Y step
  double picard_inner_tol = 1e-10;
  int threads = 1;
  bool store_values = true;       // materialize per-particle Y/Z/Z0 arrays
};

// Backward regression Monte Carlo pass over the given forward ensembles.
// The terminal condition is per scenario (N x n); an empty vector means zero.
BackwardSolution solve_mkv_bsde(const DriverCallback& driver,
                                const std::vector<ParticleEnsemble>& ensembles,
                                const std::vector<Eigen::MatrixXd>& terminal,
                                const GeneratorMatrix& gen, const BsdeOptions& opts = {});

BackwardSolution solve_mkv_bsde_ctx(const CtxDriverCallback& driver,
                                    const std::vector<ParticleEnsemble>& ensembles,
                                    const std::vector<Eigen::MatrixXd>& terminal,
                                    const GeneratorMatrix& gen, const BsdeOptions& opts = {});

struct TransversalityTable {
  std::vector<double> horizons;
  std::vector<double> probes;
  Eigen::MatrixXd values;  // horizons x probes: e^{kappa T'} E|Y_{T'}|^2
};

// Decay table of e^{kappa T'} E|Y|^2 at interior probe times, one row per
// truncation horizon. Solutions must share t0 and dt.
TransversalityTable transversality_check(const std::vector<BackwardSolution>& solutions,
                                         double kappa, const std::vector<double>& probe_times);

}  // namespace mfrs
