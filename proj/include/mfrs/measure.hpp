#pragma once

#include <Eigen/Dense>

#include "mfrs/rng.hpp"

namespace mfrs {

// Weighted empirical measure on R^d_e; rows of `points` are atoms.
struct EmpiricalMeasure {
  Eigen::MatrixXd points;
  Eigen::VectorXd weights;

  static EmpiricalMeasure uniform(const Eigen::MatrixXd& pts);
  void validate(double tol = 1e-12) const;
  int count() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
};

struct E1InequalityReport {
  double lhs = 0.0;  // |E[xi1] - E[xi2]|
  double mid = 0.0;  // w2 of the two empirical laws
  double rhs = 0.0;  // (E|xi1 - xi2|^2)^(1/2) under the paired coupling
  bool holds = false;
};

Eigen::VectorXd conditional_mean(const EmpiricalMeasure& mu);

double second_moment(const EmpiricalMeasure& mu);

// Exact 1-d Wasserstein-2 between empirical measures. Uniform equal-count
// inputs use the sorted-atom formula directly; uniform unequal counts are
// replicated to a common count (exact); non-uniform weights are resampled to
// uniform atoms by a seeded multinomial draw unless allow_resample is false.
double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                       bool allow_resample = true, std::uint64_t resample_seed = 0);

E1InequalityReport check_e1_inequality(const Eigen::VectorXd& xi1, const Eigen::VectorXd& xi2);

}  // namespace mfrs
