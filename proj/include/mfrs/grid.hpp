#pragma once

#include <cmath>

#include "mfrs/errors.hpp"

namespace mfrs {

// Uniform grid on [t0, T]; node k sits at t0 + k*dt.
struct TimeGrid {
  double t0 = 0.0;
  double T = 1.0;
  double dt = 0.01;

  TimeGrid() = default;
  TimeGrid(double t0_, double T_, double dt_) : t0(t0_), T(T_), dt(dt_) {
    if (!(dt > 0.0)) fail(Errc::invalid_argument, "TimeGrid: dt must be positive");
    if (!(T > t0)) fail(Errc::invalid_argument, "TimeGrid: T must exceed t0");
  }

  int steps() const { return static_cast<int>(std::lround((T - t0) / dt)); }
  int nodes() const { return steps() + 1; }
  double node(int k) const { return t0 + k * dt; }

  bool operator==(const TimeGrid& o) const { return t0 == o.t0 && T == o.T && dt == o.dt; }
};

}  // namespace mfrs
