#pragma once

#include <cstddef>

namespace mdf::kernels {

// Row-major dense kernels. All of them accumulate into C.

/// C[M x N] += A[M x K] * B[K x N]
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C);

/// C[M x N] += A^T * B with A stored as [K x M] and B as [K x N].
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C);

/// dst[cols x rows] = src[rows x cols]^T
void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst);

}  // namespace mdf::kernels
