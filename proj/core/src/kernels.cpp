#include "kernels.hpp"

namespace mdf::kernels {

void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* a = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double aik = a[k];
            if (aik == 0.0) continue;
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const double* a = A + k * M;
        const double* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const double aki = a[i];
            if (aki == 0.0) continue;
            double* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += aki * b[j];
        }
    }
}

void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace mdf::kernels
