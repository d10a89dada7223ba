#pragma once

#include <cstddef>

#include "voxgene/parallel.hpp"

namespace voxgene {

// Dense row-major kernels. Every output element is accumulated sequentially in
// ascending-k order, and parallelism is only across output rows, so results
// are bit-identical for any worker count.

// C[m x n] = A[m x k] * B[k x n]
inline void matmul_kernel(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(0, m, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
            const double* arow = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// C[m x k] += A[m x n] * B[k x n]^T   (dA = g * B^T in matmul backward)
inline void matmul_nt_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t n, std::size_t k) {
    parallel_for(0, m, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const double* arow = a + i * n;
            double* crow = c + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double* brow = b + p * n;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
                crow[p] += acc;
            }
        }
    });
}

// C[k x n] += A[m x k]^T * B[m x n]   (dB = A^T * g in matmul backward)
inline void matmul_tn_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(0, k, [&](std::size_t p0, std::size_t p1) {
        for (std::size_t p = p0; p < p1; ++p) {
            double* crow = c + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = a[i * k + p];
                const double* brow = b + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

}  // namespace voxgene
