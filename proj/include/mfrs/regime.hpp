#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mfrs/grid.hpp"
#include "mfrs/rng.hpp"

namespace mfrs {

// Generator of a continuous-time Markov chain on {0, ..., m0-1}.
// Off-diagonal entries are the transition intensities; rows sum to zero.
struct GeneratorMatrix {
  int m0 = 1;
  Eigen::MatrixXd a;

  double rate_out(int i) const { return -a(i, i); }
};

// Right-continuous step path of the regime chain, sampled on a grid but
// retaining the exact jump instants.
struct RegimePath {
  TimeGrid grid;
  std::vector<int> states;        // regime at each grid node (right-continuous value)
  std::vector<double> jump_times; // strictly increasing, in (t0, T]
  std::vector<std::pair<int, int>> jump_pairs;

  // Exact state at time s (right-continuous step function).
  int state_at(double s) const;
  // Exact occupation time of state i over [s0, s1].
  double occupation_time(int i, double s0, double s1) const;
};

// Per-(i,j) bookkeeping for the compensated jump counters
// M_ij = [M_ij] - <M_ij>: cumulative counts, compensators and per-interval
// increments of the martingale on the path's grid.
struct MartingaleLedger {
  int m0 = 1;
  TimeGrid grid;
  // Indexed [i*m0+j][interval]; diagonal i==j unused (zero).
  std::vector<Eigen::VectorXd> count_increments;
  std::vector<Eigen::VectorXd> compensator_increments;

  Eigen::VectorXd martingale_increments(int i, int j) const;
  // M_ij evaluated at the final node.
  double terminal(int i, int j) const;
};

struct EmpiricalGeneratorEstimate {
  Eigen::MatrixXd rates;       // NaN where undefined
  Eigen::MatrixXd std_errors;  // NaN where undefined
  Eigen::VectorXd occupation;  // total occupation time per state
  std::vector<bool> defined;   // per-state flag: state visited at all
};

GeneratorMatrix validate_generator(const Eigen::MatrixXd& raw, double tol = 1e-12);

RegimePath simulate_regime_path(const GeneratorMatrix& gen, int initial, const TimeGrid& grid,
                                rng::Stream& stream);

MartingaleLedger jump_martingale_ledger(const RegimePath& path, const GeneratorMatrix& gen);

// Occupation-time rate estimates with Poisson standard errors. States never
// visited are flagged undefined (NaN entries). m0 < 0 infers the state count
// from the paths.
EmpiricalGeneratorEstimate empirical_generator(const std::vector<RegimePath>& paths,
                                               int m0 = -1);

}  // namespace mfrs
