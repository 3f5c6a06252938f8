#pragma once

// Internal helpers shared by the convolution kernels. Not installed.

#include <Eigen/Core>

namespace rinn::detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

}  // namespace rinn::detail
