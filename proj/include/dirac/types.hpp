#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>

namespace dirac {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vec = Vector<double>;
using Mat = Matrix<double>;
using Index = Eigen::Index;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

}  // namespace dirac
