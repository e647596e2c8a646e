#pragma once

#include <stdexcept>
#include <string>

namespace gensdf {

// Root of every error thrown by the library. Callers that only care about
// "something in gensdf failed" catch this; the CLI maps subclasses onto exit
// codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration value or unknown enum string.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Degenerate or out-of-bounds shape parameters.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument to an operation (empty cloud, size mismatch, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Autodiff graph misuse: shape mismatch, repeated backward, non-scalar loss.
class GraphError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or version-mismatched file.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Dataset contract violations (overlapping categories, missing labels).
class DatasetError : public Error {
 public:
  using Error::Error;
};

// A loss could not be formed (e.g. every sample skipped).
class LossError : public Error {
 public:
  using Error::Error;
};

// Evaluation could not be carried out (e.g. sampling an empty mesh).
class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Training diverged; the last good checkpoint stays on disk.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace gensdf
