#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mfrs/coeffs.hpp"
#include "mfrs/coupled.hpp"

namespace mfrs {

// Open-loop control values per scenario, node and particle.
struct ControlProcess {
  TimeGrid grid;
  int m = 1;
  std::vector<std::vector<Eigen::MatrixXd>> values;  // [scenario][node]: N x m

  Eigen::VectorXd scenario_mean(int scenario, int node) const {
    return values[scenario][node].colwise().mean().transpose();
  }
  static ControlProcess zero(const TimeGrid& grid, int scenarios, int particles, int m);
};

// a*u1 + b*u2, elementwise on identical layouts.
ControlProcess lin_comb(double a, const ControlProcess& u1, double b, const ControlProcess& u2);

struct CostBreakdown {
  double total = 0.0;
  double state_quadratic = 0.0;
  double control_quadratic = 0.0;
  double cross = 0.0;
  double mean_field_quadratic = 0.0;
  double linear = 0.0;
  double std_error = 0.0;  // across scenarios
  double tail_bound = 0.0; // truncation-tail estimate, reported separately
};

struct StationarityReport {
  TimeGrid grid;
  Eigen::VectorXd node_norms;  // sqrt(E|residual|^2) per node
  double weighted_norm = 0.0;  // sqrt of the e^{kappa s}-weighted time integral
};

struct LQNumerics {
  double kappa = 0.0;
  double t0 = 0.0;
  double T = std::numeric_limits<double>::quiet_NaN();  // NaN: derive from tail_tol
  double tail_tol = 1e-3;
  double dt = 0.01;
  int particles = 512;
  int scenarios = 32;
  std::uint64_t seed = 1;
  double tol = 1e-4;
  int max_iters = 40;
  double damping = 0.5;
  std::vector<double> lambda_steps = {0.0, 1.0};
  int threads = 1;
  int picard_inner = 1;
  RegressionBasisSpec basis;
  GeneratorMatrix gen{1, Eigen::MatrixXd::Zero(1, 1)};
  bool force = false;  // proceed despite window_ok == false
};

struct ControlSolveResult {
  TimeGrid grid;
  ControlProcess u;  // untransformed optimal control
  FBSDESolution fbsde;
  CostBreakdown cost;
  StationarityReport stationarity;
  KappaBounds bounds;
  PDReport pd;
  double gain_estimate = std::numeric_limits<double>::quiet_NaN();  // scalar problems
};

struct RiccatiSolution {
  double p = 0.0;
  double gain = 0.0;  // u* = -gain * X
};

// Truncation horizon making the tail factor e^{(kappa - kappa_bar)(T - t0)}
// no larger than tail_tol.
double horizon_for_tail(const KappaBounds& kb, double kappa, double tail_tol, double t0);

// Hamiltonian system of the transformed control problem: coupled callbacks
// with the conditional-law integrals replaced by within-scenario means.
FBSDEProblem assemble_control_hamiltonian(const TransformedCoefficients& tc,
                                          const LQCoefficients& c, double kappa);

// Transformed optimal control evaluated from the backward variables.
Eigen::MatrixXd transformed_optimal_control(const LQCoefficients& c, double s, int regime,
                                            const ThetaBlock& theta, const JointMoments& law);

ControlSolveResult solve_control_problem(const LQCoefficients& c, const Eigen::VectorXd& x_t,
                                         int initial_regime, const LQNumerics& numerics);

// Forward simulation of the raw state equation under a given control,
// sharing the solver's noise streams (common random numbers).
std::vector<ParticleEnsemble> simulate_lq_state(const LQCoefficients& c,
                                                const ControlProcess& u,
                                                const Eigen::VectorXd& x_t, int initial_regime,
                                                const LQNumerics& numerics);

CostBreakdown evaluate_cost(const LQCoefficients& c, const ControlProcess& u,
                            const std::vector<ParticleEnsemble>& ensembles, double kappa);

// Cost data of the cross-term-eliminated twin problem (script blocks, S = 0).
LQCoefficients transformed_cost_view(const LQCoefficients& c);

// Adjoint BSDE along the given state ensembles.
BackwardSolution solve_adjoint(const LQCoefficients& c,
                               const std::vector<ParticleEnsemble>& ensembles, double kappa,
                               const BsdeOptions& opts = {},
                               const GeneratorMatrix* gen = nullptr);

// Optimality residual with the adjoint integrated pathwise along the
// realized noise, given the fitted (Z, Z0, K): the fitted-vs-pathwise gap
// carries the scheme's actual discretization and regression error, so this
// residual is refinement-sensitive (the fitted one cancels by construction).
StationarityReport stationarity_residual_pathwise(const LQCoefficients& c,
                                                  const ControlProcess& u, const ThetaFit& fit,
                                                  const std::vector<ParticleEnsemble>& ensembles,
                                                  const GeneratorMatrix& gen, double kappa);

// Residual of the optimality condition at u, per node and weighted. The
// ensembles supply the state/regime paths the adjoint was solved along.
StationarityReport stationarity_residual(const LQCoefficients& c, const ControlProcess& u,
                                         const BackwardSolution& adjoint,
                                         const std::vector<ParticleEnsemble>& ensembles,
                                         double kappa);
StationarityReport stationarity_residual(const LQCoefficients& c, const ControlProcess& u,
                                         const FBSDESolution& sol, double kappa);

// Scalar infinite-horizon Riccati test oracle: stationary p >= 0 from the
// ansatz Y = pX in the Hamiltonian system, solved by bisection.
RiccatiSolution riccati_scalar_oracle(double a, double b, double c, double d, double m,
                                      double n_coef, double q, double r, double kappa);

// Pooled e^{kappa s}-weighted regression of -u against x (scalar problems).
double estimate_feedback_gain(const ControlProcess& u,
                              const std::vector<ParticleEnsemble>& ensembles, double kappa,
                              double burn_in_fraction = 0.1);

// Thm-style verification functionals of the control Hamiltonian.
MonotonicityFunctionals control_monotonicity_functionals(const LQCoefficients& c);

}  // namespace mfrs
