#pragma once

#include <stdexcept>
#include <string>

namespace rvp {

// Error taxonomy. The CLI maps these to process exit codes:
//   config_error -> 2, data_error -> 3, numeric_error -> 4,
// anything else -> 1.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& m) : std::runtime_error(m) {}
};

// Malformed or inconsistent on-disk inputs (containers, manifests, checkpoints).
struct data_error : std::runtime_error {
  explicit data_error(const std::string& m) : std::runtime_error(m) {}
};

// Non-finite values where finite ones are required (losses, gradients).
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& m) : std::runtime_error(m) {}
};

// Shape/axis mismatches in tensor ops. Programming errors, not user input.
struct dimension_error : std::logic_error {
  explicit dimension_error(const std::string& m) : std::logic_error(m) {}
};

}  // namespace rvp
