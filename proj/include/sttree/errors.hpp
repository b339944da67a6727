#pragma once

#include <stdexcept>
#include <string>

namespace sttree {

// Shape/rank violations: mismatched dimensions, kernels longer than inputs,
// empty tensors where data is required.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Domain violations on values: log of a non-positive number, labels out of
// range, degenerate tree depth.
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed external data files (.ts sources, checkpoints, configs on disk).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid run configuration (unknown keys, out-of-range hyperparameters).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values encountered during optimization; training aborts.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible parameter transfer between checkpoints and models.
struct TransferError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sttree
