// Shared scalar/matrix aliases and the error types thrown across the library.
#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace epsest {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Shapes of two related matrices/vectors disagree. Message names the offender.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A weight matrix failed its Cholesky factorization. Message names which one.
class NotPositiveDefiniteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tolerance vector has a zero or negative entry.
class NonPositiveEpsilonError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An iterative solve produced an internally inconsistent result.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The requested constraint set admits no trajectory at all.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace epsest
