#pragma once

#include <stdexcept>
#include <string>

namespace gradmask {

// Bad input: malformed files, out-of-range intervals, inconsistent shapes.
// The CLI maps these to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand shapes that an operation cannot combine.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures while running (non-finite loss, I/O). Exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

}  // namespace gradmask
