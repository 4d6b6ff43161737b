#pragma once

#include <cstddef>

#include <Eigen/Core>

#include "bmt/common.hpp"

// Training-path GEMMs on row-major buffers. Eigen runs single-threaded here,
// so each shape is evaluated in a fixed order and results are reproducible.
namespace bmt {
inline namespace BMT_PRECISION_NS {
namespace detail {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// c[n,k] = a[n,d] * b[d,k]
inline void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t d, std::size_t k) {
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d), K = static_cast<Eigen::Index>(k);
  MMap(c, N, K).noalias() = CMap(a, N, D) * CMap(b, D, K);
}

// c[n,k] += a[n,d] * b[k,d]^T
inline void gemm_nt_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t d, std::size_t k) {
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d), K = static_cast<Eigen::Index>(k);
  MMap(c, N, K).noalias() += CMap(a, N, D) * CMap(b, K, D).transpose();
}

// c[d,k] += a[n,d]^T * b[n,k]
inline void gemm_tn_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t d, std::size_t k) {
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d), K = static_cast<Eigen::Index>(k);
  MMap(c, D, K).noalias() += CMap(a, N, D).transpose() * CMap(b, N, K);
}

}  // namespace detail
}  // namespace BMT_PRECISION_NS
}  // namespace bmt
