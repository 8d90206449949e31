#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tqpt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible; the message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument value was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared in a tensor after an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind {
    io,
    bad_magic,
    version_mismatch,
    truncated,
    malformed_manifest,
    shape_mismatch,
  };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// The bit budget cannot be met even with the smallest ratio in every layer.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, double min_avg_bits)
      : Error(what), min_avg_bits_(min_avg_bits) {}
  double min_avg_bits() const noexcept { return min_avg_bits_; }

 private:
  double min_avg_bits_;
};

/// Optimization produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : Error(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace tqpt
