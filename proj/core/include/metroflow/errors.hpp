#pragma once

#include <stdexcept>
#include <string>

namespace metroflow {

// Shape or extent mismatch between tensors, matrices, or series.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid experiment or model configuration (unknown variant, infeasible
// synthesis parameters, incompatible checkpoint, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent input data (unknown station, unparseable
// timestamp, leading gap in a recording series, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required, or metrics that are
// undefined for the given inputs.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Operation invoked in a state that does not allow it (inverting an
// unfitted scaler, reading an absent gradient, ...).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace metroflow
