#pragma once

#include <ostream>

namespace anyshift {

/// Quick oracle and invariant checks (a few seconds). Prints one line per
/// check; returns true when all pass.
bool run_selftest(std::ostream& os);

}  // namespace anyshift
