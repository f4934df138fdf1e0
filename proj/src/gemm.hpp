#pragma once

// Row-major GEMM on raw buffers, backed by Eigen.

#include <Eigen/Core>
#include <cstddef>

namespace qrvae::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

/// C[m,n] (+)= op(A) * op(B); A is [m,k] (or [k,m] when trans_a), B is [k,n] (or [n,k] when trans_b).
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    MapMat C(c, M, N);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b)
        C.noalias() += ConstMapMat(a, M, K) * ConstMapMat(b, K, N);
    else if (trans_a && !trans_b)
        C.noalias() += ConstMapMat(a, K, M).transpose() * ConstMapMat(b, K, N);
    else if (!trans_a && trans_b)
        C.noalias() += ConstMapMat(a, M, K) * ConstMapMat(b, N, K).transpose();
    else
        C.noalias() += ConstMapMat(a, K, M).transpose() * ConstMapMat(b, N, K).transpose();
}

}  // namespace qrvae::detail
