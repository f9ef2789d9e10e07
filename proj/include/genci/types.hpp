#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace genci {

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// All model math runs in double; gradient checks against central finite
// differences need the headroom.
using Real = double;
using Mat = MatrixX<Real>;
using Vec = VectorX<Real>;
using Index = Eigen::Index;

}  // namespace genci
