#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mfrs/lq.hpp"

namespace mfrs {

// F0-measurable population profile: one deterministic-given-the-scenario
// state/control path per common-noise scenario.
struct PopulationProfile {
  TimeGrid grid;
  std::vector<Eigen::MatrixXd> X;  // [scenario]: nodes x n
  std::vector<Eigen::MatrixXd> u;  // [scenario]: nodes x m

  static PopulationProfile zero(const TimeGrid& grid, int scenarios, int n, int m);
};

struct BestResponseResult {
  ControlProcess u;
  FBSDESolution fbsde;
};

enum class GameSolveMode { direct, iterate };

struct EquilibriumReport {
  TimeGrid grid;
  ControlProcess u;            // equilibrium control
  FBSDESolution fbsde;         // equilibrium Hamiltonian solution
  PopulationProfile profile;   // (E0[X], E0[u]) of the reported equilibrium
  double fixed_point_gap = 0.0;   // ||T(X,u) - (X,u)|| in the weighted norm
  double consistency_gap = 0.0;   // profile-level gap of the consistency condition
  bool converged = false;
  int outer_iterations = 0;       // iterate mode
  std::vector<double> outer_gaps; // iterate mode history
  GameStructureReport structure;
  KappaBounds bounds;
};

struct GameCostResult {
  double total = 0.0;
  double std_error = 0.0;
  Eigen::VectorXd per_scenario;
};

struct NashDeviationRow {
  int trial = 0;
  double eps = 0.0;
  double cost_equilibrium = 0.0;
  double cost_deviation = 0.0;
  double se_difference = 0.0;
  bool pass = false;  // J(eq) <= J(dev) + 2 SE
};

struct NashDeviationTable {
  std::vector<NashDeviationRow> rows;
  bool all_pass = false;
};

PopulationProfile project_profile(const ControlProcess& u,
                                  const std::vector<ParticleEnsemble>& ensembles);

// Weighted L2 distance between two profiles on a common layout.
double profile_distance(const PopulationProfile& a, const PopulationProfile& b, double kappa);

// Best response against a frozen profile: the non-mean-field Hamiltonian
// system with the profile folded into the inhomogeneities.
BestResponseResult best_response(const GameCoefficients& g, const PopulationProfile& profile,
                                 const Eigen::VectorXd& x_t, int initial_regime,
                                 const LQNumerics& numerics);

EquilibriumReport solve_game_fixed_point(const GameCoefficients& g, const Eigen::VectorXd& x_t,
                                         int initial_regime, const LQNumerics& numerics,
                                         GameSolveMode mode);

// State equation under a given control with the profile frozen in the
// dynamics; shares the solver noise streams.
std::vector<ParticleEnsemble> simulate_game_state(const GameCoefficients& g,
                                                  const ControlProcess& u,
                                                  const PopulationProfile& profile,
                                                  const Eigen::VectorXd& x_t,
                                                  int initial_regime,
                                                  const LQNumerics& numerics);

GameCostResult game_cost(const GameCoefficients& g, const ControlProcess& u,
                         const std::vector<ParticleEnsemble>& ensembles,
                         const PopulationProfile& profile, double kappa);

NashDeviationTable nash_deviation_test(const GameCoefficients& g,
                                       const EquilibriumReport& report,
                                       const Eigen::VectorXd& x_t, int initial_regime,
                                       const LQNumerics& numerics, int deviations,
                                       const std::vector<double>& eps_list,
                                       std::uint64_t seed = 99);

// Equilibrium Hamiltonian system (direct mode) as a coupled problem.
FBSDEProblem assemble_game_hamiltonian(const GameCoefficients& g, double kappa);

// First-order condition of the best response at the reported equilibrium,
// against its own projected profile; near zero at a Nash point.
StationarityReport game_stationarity_residual(const GameCoefficients& g,
                                              const EquilibriumReport& report, double kappa);

// Verification functionals of the game solvability theorem; the
// monotonicity side is checked against the sharper L2-scaled bound.
MonotonicityFunctionals game_monotonicity_functionals(const GameCoefficients& g);

}  // namespace mfrs
