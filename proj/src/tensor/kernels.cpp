#include "kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace vitkd::kernels {

namespace {

// 16 floats; GCC/Clang lower this to whatever SIMD width the target has.
typedef float v16 __attribute__((vector_size(64)));
// Same type without the alignment requirement, for loads/stores into rows.
typedef float v16u __attribute__((vector_size(64), aligned(4)));

constexpr std::size_t kLanes = 16;
constexpr std::size_t kRows = 6;

inline v16 load(const float* p) { return *reinterpret_cast<const v16u*>(p); }
inline void store(float* p, v16 v) { *reinterpret_cast<v16u*>(p) = v; }

// C[R×16·NV] (+)= A[R×k] · B[k×16·NV]. Every output element is reduced over
// p = 0..k−1 in order, whatever R and NV are.
template <std::size_t R, std::size_t NV>
inline void micro(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                  std::size_t k, bool accumulate) {
  v16 s[R][NV];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < NV; ++v) s[r][v] = accumulate ? load(c + r * ldc + v * kLanes) : v16{};
  }
  for (std::size_t p = 0; p < k; ++p) {
    v16 bv[NV];
    for (std::size_t v = 0; v < NV; ++v) bv[v] = load(b + p * ldb + v * kLanes);
    for (std::size_t r = 0; r < R; ++r) {
      const float av = a[r * lda + p];
      for (std::size_t v = 0; v < NV; ++v) s[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < NV; ++v) store(c + r * ldc + v * kLanes, s[r][v]);
  }
}

template <std::size_t NV>
void column_panel(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                  std::size_t m, std::size_t k, bool accumulate) {
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) micro<kRows, NV>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, k, accumulate);
  const float* ai = a + i * lda;
  float* ci = c + i * ldc;
  switch (m - i) {
    case 5: micro<5, NV>(ai, lda, b, ldb, ci, ldc, k, accumulate); break;
    case 4: micro<4, NV>(ai, lda, b, ldb, ci, ldc, k, accumulate); break;
    case 3: micro<3, NV>(ai, lda, b, ldb, ci, ldc, k, accumulate); break;
    case 2: micro<2, NV>(ai, lda, b, ldb, ci, ldc, k, accumulate); break;
    case 1: micro<1, NV>(ai, lda, b, ldb, ci, ldc, k, accumulate); break;
    default: break;
  }
}

// A is [m×k] with row stride lda; B is [k×n], C is [m×n].
void gemm_nn_block(const float* a, std::size_t lda, const float* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
  std::size_t j = 0;
  for (; j + 2 * kLanes <= n; j += 2 * kLanes) column_panel<2>(a, lda, b + j, n, c + j, n, m, k, accumulate);
  if (j + kLanes <= n) {
    column_panel<1>(a, lda, b + j, n, c + j, n, m, k, accumulate);
    j += kLanes;
  }
  if (j == n) return;

  // Column tail: run the 16-wide kernel on zero-padded copies.
  const std::size_t w = n - j;
  std::vector<float> bp(k * kLanes, 0.0f);
  for (std::size_t p = 0; p < k; ++p) std::memcpy(bp.data() + p * kLanes, b + p * n + j, w * sizeof(float));
  std::vector<float> cp(m * kLanes, 0.0f);
  if (accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::memcpy(cp.data() + i * kLanes, c + i * n + j, w * sizeof(float));
  }
  column_panel<1>(a, lda, bp.data(), kLanes, cp.data(), kLanes, m, k, accumulate);
  for (std::size_t i = 0; i < m; ++i) std::memcpy(c + i * n + j, cp.data() + i * kLanes, w * sizeof(float));
}

}  // namespace

// Blocking over k keeps the per-element order: each block resumes from the
// partial sums the previous block stored.
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  constexpr std::size_t kDepth = 256;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0f);
    return;
  }
  for (std::size_t p = 0; p < k; p += kDepth) {
    gemm_nn_block(a + p, k, b + p * n, c, m, std::min(kDepth, k - p), n, accumulate || p > 0);
  }
}

void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<float> at(k * m);
  transpose(a, at.data(), m, k);
  gemm_nn(at.data(), b, c, k, m, n, accumulate);
}

void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  std::vector<float> bt(n * k);
  transpose(b, bt.data(), k, n);
  gemm_nn(a, bt.data(), c, m, n, k, accumulate);
}

void transpose(const float* src, float* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

}  // namespace vitkd::kernels
