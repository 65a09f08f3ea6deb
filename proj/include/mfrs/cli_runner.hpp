#pragma once

#include <string>
#include <vector>

namespace mfrs {

// Batch front end. Exit codes: 0 success, 2 validation failure, 3 malformed
// input, 4 solver non-convergence.
int run_cli(const std::vector<std::string>& args);

}  // namespace mfrs
