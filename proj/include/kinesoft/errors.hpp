#pragma once

#include <stdexcept>
#include <string>

namespace kinesoft {

/// Precondition violated by the caller (bad shapes, out-of-range values).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A point could not be located inside any tetrahedron.
class NotEmbeddable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Newton solve did not reach the residual tolerance.
class SolverFailure : public std::runtime_error {
 public:
  SolverFailure(const std::string& what, double residual, int iterations)
      : std::runtime_error(what), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// Data carries no information for the requested estimate.
class DegenerateData : public std::runtime_error {
 public:
  DegenerateData(const std::string& what, int index)
      : std::runtime_error(what), index_(index) {}
  int index() const { return index_; }

 private:
  int index_;
};

class TrainingFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OptimizationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FittingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing upstream artifact or malformed file.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kinesoft
