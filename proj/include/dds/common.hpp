#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace dds {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// Base error for anything a caller did wrong (bad arguments, bad config).
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unparsable or inconsistent configuration. CLI exit code 2.
struct config_error : error {
  using error::error;
};

// Non-finite values, divergence, failed numerics. CLI exit code 3.
struct numeric_error : error {
  using error::error;
};

// Filesystem and serialization failures. CLI exit code 4.
struct io_error : error {
  using error::error;
};

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace dds
