#pragma once

#include <stdexcept>
#include <string>

namespace mfrs {

enum class Errc {
  not_square,
  negative_intensity,
  row_sum_nonzero,
  state_out_of_range,
  dimension_mismatch,
  non_uniform_unsupported,
  r_not_invertible,
  rbar_sum_not_invertible,
  non_finite_state,
  no_convergence,
  step_floor_reached,
  grid_mismatch,
  pd_violation,
  no_psd_root,
  malformed_spec,
  invalid_argument,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace mfrs
