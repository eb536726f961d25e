#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metamd {

// Dimension mismatches and other precondition violations on arguments.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A size-dependent operation was asked to exceed its configured cap.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The divergence parameters are unusable (zero diagonal entry, lambda = 0).
class DivergenceInvalidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary input. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical routine failed (e.g. kernel matrix not positive definite).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metamd
