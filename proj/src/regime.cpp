#include "mfrs/regime.hpp"

#include <algorithm>
#include <cmath>

#include "mfrs/errors.hpp"

namespace mfrs {

GeneratorMatrix validate_generator(const Eigen::MatrixXd& raw, double tol) {
  if (raw.rows() != raw.cols() || raw.rows() < 1)
    fail(Errc::not_square, "generator must be a square matrix with m0 >= 1");
  const int m0 = static_cast<int>(raw.rows());
  for (int i = 0; i < m0; ++i) {
    for (int j = 0; j < m0; ++j) {
      if (i != j && raw(i, j) < 0.0)
        fail(Errc::negative_intensity, "generator entry (" + std::to_string(i) + "," +
                                           std::to_string(j) + ") is negative");
    }
    double row_sum = raw.row(i).sum();
    if (std::abs(row_sum) > tol)
      fail(Errc::row_sum_nonzero,
           "generator row " + std::to_string(i) + " sums to " + std::to_string(row_sum));
  }
  return GeneratorMatrix{m0, raw};
}

int RegimePath::state_at(double s) const {
  int st = states.empty() ? 0 : states.front();
  if (jump_times.empty()) return st;
  // state after the last jump at or before s
  st = jump_pairs.empty() ? st : jump_pairs.front().first;
  for (std::size_t k = 0; k < jump_times.size(); ++k) {
    if (jump_times[k] <= s)
      st = jump_pairs[k].second;
    else
      break;
  }
  return st;
}

double RegimePath::occupation_time(int i, double s0, double s1) const {
  if (s1 <= s0) return 0.0;
  double acc = 0.0;
  double cur = s0;
  int st = state_at(s0);
  for (std::size_t k = 0; k < jump_times.size(); ++k) {
    double tk = jump_times[k];
    if (tk <= s0) continue;
    if (tk >= s1) break;
    if (st == i) acc += tk - cur;
    cur = tk;
    st = jump_pairs[k].second;
  }
  if (st == i) acc += s1 - cur;
  return acc;
}

RegimePath simulate_regime_path(const GeneratorMatrix& gen, int initial, const TimeGrid& grid,
                                rng::Stream& stream) {
  if (initial < 0 || initial >= gen.m0)
    fail(Errc::state_out_of_range, "initial regime out of range");
  RegimePath path;
  path.grid = grid;

  double t = grid.t0;
  int state = initial;
  while (true) {
    double rate = gen.rate_out(state);
    if (rate <= 0.0) break;  // absorbing
    double tau = stream.exponential(rate);
    t += tau;
    if (t > grid.T) break;
    // jump target j != state with probability a(state, j) / rate
    double u = stream.uniform() * rate;
    double acc = 0.0;
    int target = -1;
    for (int j = 0; j < gen.m0; ++j) {
      if (j == state) continue;
      acc += gen.a(state, j);
      if (u <= acc) {
        target = j;
        break;
      }
    }
    if (target < 0) {  // numerical edge: u landed on the top of the range
      for (int j = gen.m0 - 1; j >= 0; --j)
        if (j != state && gen.a(state, j) > 0.0) {
          target = j;
          break;
        }
    }
    path.jump_times.push_back(t);
    path.jump_pairs.emplace_back(state, target);
    state = target;
  }

  path.states.resize(grid.nodes());
  std::size_t jk = 0;
  int cur = initial;
  for (int k = 0; k < grid.nodes(); ++k) {
    double s = grid.node(k);
    while (jk < path.jump_times.size() && path.jump_times[jk] <= s) {
      cur = path.jump_pairs[jk].second;
      ++jk;
    }
    path.states[k] = cur;
  }
  return path;
}

MartingaleLedger jump_martingale_ledger(const RegimePath& path, const GeneratorMatrix& gen) {
  for (int s : path.states)
    if (s < 0 || s >= gen.m0) fail(Errc::state_out_of_range, "path state outside generator space");
  for (auto& [from, to] : path.jump_pairs)
    if (from < 0 || from >= gen.m0 || to < 0 || to >= gen.m0)
      fail(Errc::state_out_of_range, "jump pair outside generator space");

  const int m0 = gen.m0;
  const int intervals = path.grid.steps();
  MartingaleLedger ledger;
  ledger.m0 = m0;
  ledger.grid = path.grid;
  ledger.count_increments.assign(m0 * m0, Eigen::VectorXd::Zero(intervals));
  ledger.compensator_increments.assign(m0 * m0, Eigen::VectorXd::Zero(intervals));

  for (std::size_t k = 0; k < path.jump_times.size(); ++k) {
    double tk = path.jump_times[k];
    // jump at tk is counted in the interval (t_{l}, t_{l+1}] containing tk
    int l = static_cast<int>(std::ceil((tk - path.grid.t0) / path.grid.dt)) - 1;
    l = std::clamp(l, 0, intervals - 1);
    auto [from, to] = path.jump_pairs[k];
    ledger.count_increments[from * m0 + to](l) += 1.0;
  }
  for (int l = 0; l < intervals; ++l) {
    double s0 = path.grid.node(l), s1 = path.grid.node(l + 1);
    for (int i = 0; i < m0; ++i) {
      double occ = path.occupation_time(i, s0, s1);
      if (occ == 0.0) continue;
      for (int j = 0; j < m0; ++j) {
        if (j == i) continue;
        ledger.compensator_increments[i * m0 + j](l) = gen.a(i, j) * occ;
      }
    }
  }
  return ledger;
}

Eigen::VectorXd MartingaleLedger::martingale_increments(int i, int j) const {
  return count_increments[i * m0 + j] - compensator_increments[i * m0 + j];
}

double MartingaleLedger::terminal(int i, int j) const {
  return martingale_increments(i, j).sum();
}

EmpiricalGeneratorEstimate empirical_generator(const std::vector<RegimePath>& paths, int m0) {
  if (paths.empty()) fail(Errc::invalid_argument, "empirical_generator needs at least one path");
  if (m0 < 0) {
    m0 = 0;
    for (const auto& p : paths) {
      for (int s : p.states) m0 = std::max(m0, s + 1);
      for (auto& [f, t] : p.jump_pairs) m0 = std::max({m0, f + 1, t + 1});
    }
  }

  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(m0, m0);
  Eigen::VectorXd occ = Eigen::VectorXd::Zero(m0);
  for (const auto& p : paths) {
    for (auto& [f, t] : p.jump_pairs) counts(f, t) += 1.0;
    for (int i = 0; i < m0; ++i) occ(i) += p.occupation_time(i, p.grid.t0, p.grid.T);
  }

  EmpiricalGeneratorEstimate est;
  est.rates = Eigen::MatrixXd::Constant(m0, m0, std::numeric_limits<double>::quiet_NaN());
  est.std_errors = est.rates;
  est.occupation = occ;
  est.defined.resize(m0);
  for (int i = 0; i < m0; ++i) {
    est.defined[i] = occ(i) > 0.0;
    if (!est.defined[i]) continue;
    double diag = 0.0;
    for (int j = 0; j < m0; ++j) {
      if (j == i) continue;
      est.rates(i, j) = counts(i, j) / occ(i);
      est.std_errors(i, j) = std::sqrt(counts(i, j)) / occ(i);
      diag += est.rates(i, j);
    }
    est.rates(i, i) = -diag;
  }
  return est;
}

}  // namespace mfrs
