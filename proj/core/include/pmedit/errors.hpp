#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "pmedit/types.hpp"

namespace pmedit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands (vector length, matrix rows/cols).
struct DimensionError : Error {
  using Error::Error;
};

// Non-finite or otherwise invalid input values and rejected preconditions.
struct InputError : Error {
  using Error::Error;
};

// Configuration-level rejection (bad batch size, unknown method, ...).
// CLI maps this to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// A symmetric factorization (LLT) failed: the matrix is singular or
// indefinite at working precision.
struct FactorizationError : Error {
  using Error::Error;
};

// k_e^T C0^-1 k_e collapsed to <= 1e-14: the edit key carries no usable
// direction against the preservation covariance.
struct DegenerateKeyError : Error {
  using Error::Error;
};

// Equality-constrained batch with more edits than key dimensions.
struct InfeasibleBatchError : Error {
  using Error::Error;
};

// Rank-deficient edit-key matrix; carries the columns that are linear
// combinations of earlier ones so callers can drop those facts.
struct RankError : Error {
  RankError(const std::string& what, std::vector<Index> dependent)
      : Error(what), dependent_columns(std::move(dependent)) {}
  std::vector<Index> dependent_columns;
};

// Gradient descent produced a non-finite or persistently increasing loss.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, long at_step)
      : Error(what), step(at_step) {}
  long step = -1;
};

// Non-finite value surfaced inside a forward pass; message names the layer.
struct NumericError : Error {
  using Error::Error;
};

// Snapshot hash mismatch on restore.
struct CorruptionError : Error {
  using Error::Error;
};

}  // namespace pmedit
