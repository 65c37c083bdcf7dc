#pragma once

#include <cstddef>
#include <vector>

// Dense kernels. Every output element accumulates its terms in ascending
// reduction index, independent of blocking, so results are reproducible and
// match a naive triple loop bit for bit.

namespace marnet::kernels {

/// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_acc(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A, std::size_t lda,
              const T* __restrict B, std::size_t ldb, T* __restrict C, std::size_t ldc) {
  std::size_t m = 0;
  for (; m + 4 <= M; m += 4) {
    const T* a0 = A + m * lda;
    const T* a1 = a0 + lda;
    const T* a2 = a1 + lda;
    const T* a3 = a2 + lda;
    T* __restrict c0 = C + m * ldc;
    T* __restrict c1 = c0 + ldc;
    T* __restrict c2 = c1 + ldc;
    T* __restrict c3 = c2 + ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const T* __restrict b = B + k * ldb;
      const T x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      for (std::size_t n = 0; n < N; ++n) {
        const T bv = b[n];
        c0[n] += x0 * bv;
        c1[n] += x1 * bv;
        c2[n] += x2 * bv;
        c3[n] += x3 * bv;
      }
    }
  }
  for (; m < M; ++m) {
    const T* a = A + m * lda;
    T* __restrict c = C + m * ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const T* __restrict b = B + k * ldb;
      const T x = a[k];
      for (std::size_t n = 0; n < N; ++n) c[n] += x * b[n];
    }
  }
}

/// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn_acc(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A,
                 std::size_t lda, const T* __restrict B, std::size_t ldb, T* __restrict C,
                 std::size_t ldc) {
  constexpr std::size_t kBlock = 64;
  for (std::size_t m0 = 0; m0 < M; m0 += kBlock) {
    const std::size_t m1 = m0 + kBlock < M ? m0 + kBlock : M;
    for (std::size_t k = 0; k < K; ++k) {
      T* __restrict c = C + k * ldc;
      for (std::size_t m = m0; m < m1; ++m) {
        const T a = A[m * lda + k];
        if (a == T{0}) continue;
        const T* __restrict b = B + m * ldb;
        for (std::size_t n = 0; n < N; ++n) c[n] += a * b[n];
      }
    }
  }
}

/// Out[N,K] = In[K,N]^T
template <class T>
void transpose(std::size_t K, std::size_t N, const T* in, T* out) {
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t n = 0; n < N; ++n) out[n * K + k] = in[k * N + n];
}

}  // namespace marnet::kernels
