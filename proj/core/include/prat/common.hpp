#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace prat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration (hyper-parameters, specs, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or numerically impossible requests.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk artifact (bad magic, truncation, version).
class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class EvalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace prat
