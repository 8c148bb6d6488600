#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace dirac {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between arguments.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed or invalid input data (files, trajectories, archives).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numerical failure. Optionally tagged with the trajectory step at which it
// happened; at_step() returns a tagged copy for rethrowing.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::optional<std::size_t> step = std::nullopt)
      : Error(step ? what + " (at step " + std::to_string(*step) + ")" : what),
        detail_(what),
        step_(step) {}

  const std::optional<std::size_t>& step() const noexcept { return step_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::optional<std::size_t> step_;
};

// Rank-deficient constraint Gram matrix or non-invertible mass matrix.
class SingularMatrix : public NumericalError {
 public:
  using NumericalError::NumericalError;
  SingularMatrix at_step(std::size_t k) const { return SingularMatrix(detail(), k); }
};

class NoConvergence : public NumericalError {
 public:
  NoConvergence(const std::string& what, double residual, int iterations,
                std::optional<std::size_t> step = std::nullopt)
      : NumericalError(what + ": residual " + std::to_string(residual) + " after " +
                           std::to_string(iterations) + " iterations",
                       step),
        base_(what),
        residual_(residual),
        iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }
  NoConvergence at_step(std::size_t k) const { return NoConvergence(base_, residual_, iterations_, k); }

 private:
  std::string base_;
  double residual_;
  int iterations_;
};

}  // namespace dirac
