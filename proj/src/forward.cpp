#include "mfrs/forward.hpp"

#include <cmath>

#include "mfrs/errors.hpp"
#include "mfrs/parallel.hpp"

namespace mfrs {

MomentSummary ParticleEnsemble::moments(int node) const {
  MomentSummary ms;
  const Eigen::MatrixXd& X = states[node];
  ms.mean = X.colwise().mean().transpose();
  ms.second_moment = X.squaredNorm() / static_cast<double>(X.rows());
  return ms;
}

Eigen::MatrixXd idiosyncratic_normals(std::uint64_t root_seed, int scenario, int step,
                                      int particles, int d) {
  rng::Key key = rng::Key(root_seed).child(rng::kIdiosyncratic, scenario, step);
  Eigen::MatrixXd out(particles, d);
  for (int i = 0; i < particles; ++i)
    for (int c = 0; c < d; ++c)
      out(i, c) = rng::normal(key, static_cast<std::uint64_t>(i) * d + c);
  return out;
}

Eigen::VectorXd common_normals(std::uint64_t root_seed, int scenario, int step, int d0) {
  rng::Key key = rng::Key(root_seed).child(rng::kCommon, scenario, step);
  Eigen::VectorXd out(d0);
  for (int c = 0; c < d0; ++c) out(c) = rng::normal(key, c);
  return out;
}

ParticleEnsemble make_scenario_scaffold(const ForwardSpec& spec, int scenario) {
  ParticleEnsemble ens;
  ens.scenario_id = scenario;
  ens.grid = spec.grid;
  ens.root_seed = spec.seed;
  rng::Stream regime_stream(rng::Key(spec.seed).child(rng::kRegime, scenario));
  ens.regime = simulate_regime_path(spec.gen, spec.initial_regime, spec.grid, regime_stream);
  ens.common.seed_id = rng::Key(spec.seed).child(rng::kCommon, scenario).state;
  return ens;
}

void fill_common_noise(ParticleEnsemble& ens, const ForwardSpec& spec, int d0) {
  const int steps = spec.grid.steps();
  const double sdt = std::sqrt(spec.grid.dt);
  ens.common.dW0.resize(steps, d0);
  for (int k = 0; k < steps; ++k)
    ens.common.dW0.row(k) = sdt * common_normals(spec.seed, ens.scenario_id, k, d0).transpose();
}

namespace {

void check_finite(const Eigen::MatrixXd& X, int node) {
  if (!X.allFinite())
    fail(Errc::non_finite_state,
         "non-finite state detected at grid node " + std::to_string(node));
}

}  // namespace

std::vector<ParticleEnsemble> simulate_conditional_mkv_sde(const CoefficientCallbacks& cb,
                                                           const Eigen::MatrixXd& x0,
                                                           const ForwardSpec& spec,
                                                           int threads) {
  const int n = cb.n, d = cb.d, d0 = cb.d0;
  const int N = spec.particles;
  if (x0.cols() != n) fail(Errc::dimension_mismatch, "x0 must have n columns");
  if (x0.rows() != 1 && x0.rows() != N)
    fail(Errc::dimension_mismatch, "x0 must have 1 or N rows");

  std::vector<ParticleEnsemble> out(spec.scenarios);
  parallel_for(spec.scenarios, threads, [&](int sc) {
    ParticleEnsemble ens = make_scenario_scaffold(spec, sc);
    ens.idio_d = d;
    fill_common_noise(ens, spec, d0);
    const int steps = spec.grid.steps();
    const double dt = spec.grid.dt;
    const double sdt = std::sqrt(dt);

    ens.states.resize(steps + 1);
    ens.states[0] = x0.rows() == N ? x0 : Eigen::MatrixXd(x0.colwise().replicate(N));

    for (int k = 0; k < steps; ++k) {
      const Eigen::MatrixXd& X = ens.states[k];
      const double s = spec.grid.node(k);
      const int regime = ens.regime.states[k];
      MomentSummary law;
      law.mean = X.colwise().mean().transpose();
      law.second_moment = X.squaredNorm() / static_cast<double>(N);

      Eigen::MatrixXd next = X;
      if (cb.drift) next.noalias() += dt * cb.drift(s, X, law, regime);
      if (cb.diffusion_idio) {
        const Eigen::MatrixXd sig = cb.diffusion_idio(s, X, law, regime);
        const Eigen::MatrixXd dW = sdt * idiosyncratic_normals(spec.seed, sc, k, N, d);
        for (int c = 0; c < d; ++c)
          next.array() += sig.middleCols(c * n, n).array().colwise() * dW.col(c).array();
      }
      if (cb.diffusion_common) {
        const Eigen::MatrixXd sig0 = cb.diffusion_common(s, X, law, regime);
        for (int c = 0; c < d0; ++c)
          next.noalias() += sig0.middleCols(c * n, n) * ens.common.dW0(k, c);
      }
      check_finite(next, k + 1);
      ens.states[k + 1] = std::move(next);
    }
    out[sc] = std::move(ens);
  });
  return out;
}

WeightedProfile weighted_l2_profile(const std::vector<ParticleEnsemble>& ensembles,
                                    double kappa) {
  if (ensembles.empty()) fail(Errc::invalid_argument, "no ensembles supplied");
  const TimeGrid& grid = ensembles[0].grid;
  const int nodes = grid.nodes();
  WeightedProfile wp;
  wp.nodes.resize(nodes);
  wp.profile.setZero(nodes);
  long total = 0;
  for (const auto& ens : ensembles) total += ens.particles();
  for (int k = 0; k < nodes; ++k) {
    wp.nodes(k) = grid.node(k);
    double acc = 0.0;
    for (const auto& ens : ensembles) acc += ens.states[k].squaredNorm();
    wp.profile(k) = std::exp(kappa * grid.node(k)) * acc / static_cast<double>(total);
  }
  for (int k = 0; k + 1 < nodes; ++k)
    wp.integral += 0.5 * (wp.profile(k) + wp.profile(k + 1)) * grid.dt;
  return wp;
}

}  // namespace mfrs
