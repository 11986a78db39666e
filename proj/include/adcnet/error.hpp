#pragma once

#include <stdexcept>
#include <string>

namespace adcnet {

/// Bad input: malformed files, unknown labels, invalid configuration.
/// The CLI maps this to exit code 1 and the service to HTTP 400.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while doing otherwise valid work (I/O, divergence, corrupt checkpoint).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace adcnet
