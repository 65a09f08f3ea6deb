#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "mfrs/grid.hpp"
#include "mfrs/regime.hpp"
#include "mfrs/rng.hpp"

namespace mfrs {

struct CommonNoisePath {
  Eigen::MatrixXd dW0;  // steps x d0, increments ~ N(0, dt I)
  std::uint64_t seed_id = 0;
};

// Within-scenario moment summary of the particle cloud; the empirical
// conditional law enters all coefficients through these.
struct MomentSummary {
  Eigen::VectorXd mean;
  double second_moment = 0.0;  // average of |x|^2
};

// One common-noise scenario: a particle cloud sharing a single regime path
// and a single common-noise path.
struct ParticleEnsemble {
  int scenario_id = 0;
  TimeGrid grid;
  RegimePath regime;
  CommonNoisePath common;
  std::vector<Eigen::MatrixXd> states;  // one (N x n) block per grid node
  std::uint64_t root_seed = 0;
  int idio_d = 1;  // idiosyncratic noise dimension (for increment regeneration)

  int particles() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
  MomentSummary moments(int node) const;
};

// Vectorized coefficient callbacks: rows are particles. Diffusion outputs are
// flattened column-major, entry (state r, noise column c) at index c*n + r.
// Null callbacks are treated as identically zero.
struct CoefficientCallbacks {
  int n = 1, d = 1, d0 = 1;
  using Fn = std::function<Eigen::MatrixXd(double s, const Eigen::MatrixXd& X,
                                           const MomentSummary& law, int regime)>;
  Fn drift;            // N x n
  Fn diffusion_idio;   // N x (n*d)
  Fn diffusion_common; // N x (n*d0)
};

struct ForwardSpec {
  TimeGrid grid;
  int scenarios = 1;
  int particles = 1;
  std::uint64_t seed = 0;
  GeneratorMatrix gen{1, Eigen::MatrixXd::Zero(1, 1)};
  int initial_regime = 0;
};

struct WeightedProfile {
  Eigen::VectorXd nodes;    // grid times
  Eigen::VectorXd profile;  // e^{kappa s} * E|X_s|^2 per node
  double integral = 0.0;    // trapezoid over [t0, T]
};

// Deterministic per-(scenario, step) noise blocks.
Eigen::MatrixXd idiosyncratic_normals(std::uint64_t root_seed, int scenario, int step,
                                      int particles, int d);
Eigen::VectorXd common_normals(std::uint64_t root_seed, int scenario, int step, int d0);

// Regime path and common-noise seed for one scenario (states left empty).
ParticleEnsemble make_scenario_scaffold(const ForwardSpec& spec, int scenario);

// Populates ens.common.dW0 with the scenario's N(0, dt I) increments.
void fill_common_noise(ParticleEnsemble& ens, const ForwardSpec& spec, int d0);

// Euler-Maruyama over the interacting particle cloud, one ensemble per
// common-noise scenario. x0 has either one row (broadcast) or N rows.
std::vector<ParticleEnsemble> simulate_conditional_mkv_sde(const CoefficientCallbacks& cb,
                                                           const Eigen::MatrixXd& x0,
                                                           const ForwardSpec& spec,
                                                           int threads = 1);

WeightedProfile weighted_l2_profile(const std::vector<ParticleEnsemble>& ensembles,
                                    double kappa);

}  // namespace mfrs
