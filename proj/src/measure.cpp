#include "mfrs/measure.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfrs/errors.hpp"

namespace mfrs {

EmpiricalMeasure EmpiricalMeasure::uniform(const Eigen::MatrixXd& pts) {
  EmpiricalMeasure mu;
  mu.points = pts;
  mu.weights = Eigen::VectorXd::Constant(pts.rows(), 1.0 / static_cast<double>(pts.rows()));
  return mu;
}

void EmpiricalMeasure::validate(double tol) const {
  if (points.rows() < 1) fail(Errc::invalid_argument, "empirical measure needs at least one atom");
  if (weights.size() != points.rows())
    fail(Errc::dimension_mismatch, "weights/points length mismatch");
  if ((weights.array() < 0.0).any())
    fail(Errc::invalid_argument, "empirical measure weights must be nonnegative");
  if (std::abs(weights.sum() - 1.0) > tol)
    fail(Errc::invalid_argument, "empirical measure weights must sum to 1");
}

Eigen::VectorXd conditional_mean(const EmpiricalMeasure& mu) {
  mu.validate();
  return mu.points.transpose() * mu.weights;
}

double second_moment(const EmpiricalMeasure& mu) {
  mu.validate();
  return (mu.points.array().square().rowwise().sum() * mu.weights.array()).sum();
}

namespace {

bool is_uniform(const Eigen::VectorXd& w, double tol = 1e-12) {
  double target = 1.0 / static_cast<double>(w.size());
  return ((w.array() - target).abs() < tol).all();
}

std::vector<double> sorted_atoms_1d(const EmpiricalMeasure& mu) {
  std::vector<double> v(mu.points.data(), mu.points.data() + mu.points.rows());
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<double> resample_to_uniform(const EmpiricalMeasure& mu, int count,
                                        std::uint64_t seed) {
  rng::Stream stream(rng::Key(seed).child(rng::kUser, 0xC0DE));
  std::vector<double> out(count);
  for (int k = 0; k < count; ++k) {
    double u = stream.uniform();
    double acc = 0.0;
    int idx = mu.count() - 1;
    for (int i = 0; i < mu.count(); ++i) {
      acc += mu.weights(i);
      if (u <= acc) {
        idx = i;
        break;
      }
    }
    out[k] = mu.points(idx, 0);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                       bool allow_resample, std::uint64_t resample_seed) {
  mu.validate();
  nu.validate();
  if (mu.dim() != 1 || nu.dim() != 1)
    fail(Errc::dimension_mismatch, "wasserstein2_1d requires one-dimensional measures");

  std::vector<double> a, b;
  const bool u_mu = is_uniform(mu.weights), u_nu = is_uniform(nu.weights);
  if (u_mu && u_nu && mu.count() == nu.count()) {
    a = sorted_atoms_1d(mu);
    b = sorted_atoms_1d(nu);
  } else if (u_mu && u_nu) {
    // replicate to the lcm count; exact for uniform quantile measures
    long n1 = mu.count(), n2 = nu.count();
    long l = std::lcm(n1, n2);
    if (l <= 1 << 16) {
      auto sa = sorted_atoms_1d(mu), sb = sorted_atoms_1d(nu);
      a.reserve(l);
      b.reserve(l);
      for (long k = 0; k < l; ++k) {
        a.push_back(sa[k / (l / n1)]);
        b.push_back(sb[k / (l / n2)]);
      }
    } else {
      if (!allow_resample)
        fail(Errc::non_uniform_unsupported, "atom counts not reducible without resampling");
      a = resample_to_uniform(mu, 4096, resample_seed);
      b = resample_to_uniform(nu, 4096, resample_seed + 1);
    }
  } else {
    if (!allow_resample)
      fail(Errc::non_uniform_unsupported, "non-uniform weights require resampling");
    int count = std::max(4096, std::max(mu.count(), nu.count()));
    a = resample_to_uniform(mu, count, resample_seed);
    b = resample_to_uniform(nu, count, resample_seed + 1);
  }

  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double diff = a[k] - b[k];
    acc += diff * diff;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

E1InequalityReport check_e1_inequality(const Eigen::VectorXd& xi1, const Eigen::VectorXd& xi2) {
  if (xi1.size() != xi2.size() || xi1.size() == 0)
    fail(Errc::dimension_mismatch, "check_e1_inequality requires equal-count samples");
  E1InequalityReport rep;
  rep.lhs = std::abs(xi1.mean() - xi2.mean());
  EmpiricalMeasure mu = EmpiricalMeasure::uniform(xi1);
  EmpiricalMeasure nu = EmpiricalMeasure::uniform(xi2);
  rep.mid = wasserstein2_1d(mu, nu);
  rep.rhs = std::sqrt((xi1 - xi2).squaredNorm() / static_cast<double>(xi1.size()));
  const double eps = 1e-12 * (1.0 + rep.rhs);
  rep.holds = rep.lhs <= rep.mid + eps && rep.mid <= rep.rhs + eps;
  return rep;
}

}  // namespace mfrs
