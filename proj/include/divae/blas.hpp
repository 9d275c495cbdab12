#pragma once

#include <cstdint>

namespace divae {

// C[m,n] = alpha * op(A)[m,k] * op(B)[k,n] + beta * C, row-major.
// Thin wrapper over cblas_dgemm.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b, int64_t ldb,
          double beta, double* c, int64_t ldc);

// convenience: op(A) is m x k with natural leading dimensions
void matmul(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
            const double* a, const double* b, double* c,
            double alpha = 1.0, double beta = 0.0);

}  // namespace divae
