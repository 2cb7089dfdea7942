// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

namespace pixelpost {

// Row-major maps over flat tensor buffers. Eigen's GEMM is the only external
// math path in the project; keeping it behind these aliases keeps kernel code
// readable and the dependency surface obvious.
template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using EMap = Eigen::Map<EMat<S>>;

template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
using EVecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename S>
using ECVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

}  // namespace pixelpost
