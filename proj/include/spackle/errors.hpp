#pragma once

#include <stdexcept>
#include <string>

namespace spackle {

// Input data or arguments violate a documented contract. The CLI maps
// this to exit code 3; everything else derived from std::exception
// maps to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure during training/evaluation (divergence, non-finite
// intermediates). Carries the iteration or layer index in the message.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spackle
