#pragma once

#include <cstddef>

// Dense row-major kernels. Every output element is reduced over the inner
// dimension in ascending index order regardless of blocking, so results are
// bitwise reproducible and independent of how many rows are processed.
namespace vitkd::kernels {

// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

// C[k×n] (+)= A[m×k]ᵀ · B[m×n]
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

// C[m×k] (+)= A[m×n] · B[k×n]ᵀ
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);

void transpose(const float* src, float* dst, std::size_t rows, std::size_t cols);

}  // namespace vitkd::kernels
