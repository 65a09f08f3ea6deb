#pragma once

#include <string>

#include "mfrs/game.hpp"
#include "mfrs/lq.hpp"

#include <nlohmann/json_fwd.hpp>

namespace mfrs {

// Parsed problem description: the JSON schema of the batch front end.
struct ProblemSpec {
  Dims dims;
  GeneratorMatrix gen{1, Eigen::MatrixXd::Zero(1, 1)};
  int initial_regime = 0;
  Eigen::VectorXd x0;
  double t0 = 0.0;
  double T = std::numeric_limits<double>::quiet_NaN();  // NaN: derive from tail_tol
  double tail_tol = 1e-3;
  double kappa = 0.0;
  double kappa_star = 0.0;
  bool is_game = false;
  GameSolveMode game_mode = GameSolveMode::direct;
  LQCoefficients coeffs;
  GameCoefficients game;  // populated when is_game
  // numerics
  double dt = 0.01;
  int particles = 512;
  int scenarios = 32;
  std::uint64_t seed = 1;
  double tol = 1e-4;
  int max_iters = 40;
  std::vector<double> lambda_steps = {0.0, 1.0};
  double damping = 0.5;
  RegressionBasisSpec basis;
  int picard_inner = 1;
  int nash_deviations = 0;  // rows of the deviation table written by solve
};

ProblemSpec load_problem_spec(const std::string& path);
ProblemSpec parse_problem_spec(const nlohmann::json& j);

LQNumerics make_numerics(const ProblemSpec& spec, int threads);

// FNV-1a 64-bit hash as fixed-width hex (manifest content hashes).
std::string fnv1a_hex(const std::string& bytes);

}  // namespace mfrs
