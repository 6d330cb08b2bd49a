#pragma once

#include <stdexcept>
#include <string>

namespace mesograph {

/// Bad input files or tables (maps to CLI exit code 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape mismatches, bad arguments, violated preconditions.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, non-convergence (maps to CLI exit code 3).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mesograph
