#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "radt/tensor.hpp"

// Dense data-parallel kernels. Every OpenMP kernel has a serial reference
// twin (suffix _serial) that shares the same per-tile inner loops, so results
// are bit-identical for any thread count; the test suite and the benchmark
// tool compare the two.

namespace radt::kernels {

namespace detail {

// MR x NR accumulator tile held in registers across the k loop.
template <typename T, int MR, int NR>
inline void gemm_tile(const T* __restrict a, const T* __restrict b,
                      T* __restrict c, int k, int lda, int ldb, int ldc,
                      bool accumulate) {
  T acc[MR][NR];
  if (accumulate) {
    for (int r = 0; r < MR; ++r)
      for (int j = 0; j < NR; ++j) acc[r][j] = c[static_cast<std::size_t>(r) * ldc + j];
  } else {
    for (int r = 0; r < MR; ++r)
      for (int j = 0; j < NR; ++j) acc[r][j] = T(0);
  }
  for (int p = 0; p < k; ++p) {
    const T* bp = b + static_cast<std::size_t>(p) * ldb;
    for (int r = 0; r < MR; ++r) {
      T av = a[static_cast<std::size_t>(r) * lda + p];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < NR; ++j) c[static_cast<std::size_t>(r) * ldc + j] = acc[r][j];
}

template <typename T>
inline void gemm_edge(const T* __restrict a, const T* __restrict b,
                      T* __restrict c, int mr, int nr, int k, int lda, int ldb,
                      int ldc, bool accumulate) {
  for (int r = 0; r < mr; ++r) {
    for (int j = 0; j < nr; ++j) {
      T s = accumulate ? c[static_cast<std::size_t>(r) * ldc + j] : T(0);
      for (int p = 0; p < k; ++p)
        s += a[static_cast<std::size_t>(r) * lda + p] * b[static_cast<std::size_t>(p) * ldb + j];
      c[static_cast<std::size_t>(r) * ldc + j] = s;
    }
  }
}

// One full block-row of C (MR rows starting at i, full width n).
template <typename T>
inline void gemm_row_block(const T* __restrict a, const T* __restrict b,
                           T* __restrict c, int i, int m, int k, int n,
                           bool accumulate) {
  constexpr int MR = 8, NR = 32;
  int mr = std::min(MR, m - i);
  const T* ai = a + static_cast<std::size_t>(i) * k;
  T* ci = c + static_cast<std::size_t>(i) * n;
  if (mr == MR) {
    int j = 0;
    for (; j + NR <= n; j += NR)
      gemm_tile<T, MR, NR>(ai, b + j, ci + j, k, k, n, n, accumulate);
    if (j < n) gemm_edge(ai, b + j, ci + j, MR, n - j, k, k, n, n, accumulate);
  } else {
    gemm_edge(ai, b, ci, mr, n, k, k, n, n, accumulate);
  }
}

}  // namespace detail

// C[m,n] = A[m,k] * B[k,n]   (+= when accumulate)
template <typename T>
void matmul_serial(const T* a, const T* b, T* c, int m, int k, int n,
                   bool accumulate = false) {
  for (int i = 0; i < m; i += 8) detail::gemm_row_block(a, b, c, i, m, k, n, accumulate);
}

template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n,
            bool accumulate = false) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; i += 8) detail::gemm_row_block(a, b, c, i, m, k, n, accumulate);
}

// C[m,n] = A[m,k] * B[n,k]^T : rows of A dotted with rows of B.
namespace detail {
template <typename T>
inline void gemm_nt_row(const T* __restrict a, const T* __restrict b,
                        T* __restrict c, int i, int k, int n, bool accumulate) {
  const T* ai = a + static_cast<std::size_t>(i) * k;
  T* ci = c + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) {
    const T* bj = b + static_cast<std::size_t>(j) * k;
    T s = T(0);
#pragma omp simd reduction(+ : s)
    for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
    ci[j] = accumulate ? ci[j] + s : s;
  }
}
}  // namespace detail

template <typename T>
void matmul_nt_serial(const T* a, const T* b, T* c, int m, int k, int n,
                      bool accumulate = false) {
  for (int i = 0; i < m; ++i) detail::gemm_nt_row(a, b, c, i, k, n, accumulate);
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n,
               bool accumulate = false) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) detail::gemm_nt_row(a, b, c, i, k, n, accumulate);
}

// B[n,m] = A[m,n]^T
template <typename T>
void transpose_serial(const T* a, T* b, int m, int n) {
  constexpr int BL = 32;
  for (int i0 = 0; i0 < m; i0 += BL)
    for (int j0 = 0; j0 < n; j0 += BL)
      for (int i = i0; i < std::min(i0 + BL, m); ++i)
        for (int j = j0; j < std::min(j0 + BL, n); ++j)
          b[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
}

template <typename T>
void transpose(const T* a, T* b, int m, int n) {
  constexpr int BL = 32;
#pragma omp parallel for schedule(static)
  for (int j0 = 0; j0 < n; j0 += BL)
    for (int i0 = 0; i0 < m; i0 += BL)
      for (int i = i0; i < std::min(i0 + BL, m); ++i)
        for (int j = j0; j < std::min(j0 + BL, n); ++j)
          b[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
}

// C[k,n] (+)= A[m,k]^T * B[m,n], via explicit transpose into scratch. Used
// for weight gradients where k is small and m is the token count.
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n,
               bool accumulate, std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(m) * k);
  transpose(a, scratch.data(), m, k);
  matmul(scratch.data(), b, c, k, m, n, accumulate);
}

template <typename T>
void matmul_tn_serial(const T* a, const T* b, T* c, int m, int k, int n,
                      bool accumulate, std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(m) * k);
  transpose_serial(a, scratch.data(), m, k);
  matmul_serial(scratch.data(), b, c, k, m, n, accumulate);
}

// scores[i] = dot(q, key_i) / (|q| * |key_i|); keys given with precomputed
// L2 norms. Zero-norm vectors score 0.
template <typename T>
void cosine_scores_serial(const T* q, const T* keys, const T* key_norms,
                          T* scores, int count, int dim) {
  T qn = T(0);
  for (int j = 0; j < dim; ++j) qn += q[j] * q[j];
  qn = std::sqrt(qn);
  for (int i = 0; i < count; ++i) {
    const T* ki = keys + static_cast<std::size_t>(i) * dim;
    T s = T(0);
#pragma omp simd reduction(+ : s)
    for (int j = 0; j < dim; ++j) s += q[j] * ki[j];
    T denom = qn * key_norms[i];
    scores[i] = denom > T(0) ? s / denom : T(0);
  }
}

template <typename T>
void cosine_scores(const T* q, const T* keys, const T* key_norms, T* scores,
                   int count, int dim) {
  T qn = T(0);
  for (int j = 0; j < dim; ++j) qn += q[j] * q[j];
  qn = std::sqrt(qn);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < count; ++i) {
    const T* ki = keys + static_cast<std::size_t>(i) * dim;
    T s = T(0);
#pragma omp simd reduction(+ : s)
    for (int j = 0; j < dim; ++j) s += q[j] * ki[j];
    T denom = qn * key_norms[i];
    scores[i] = denom > T(0) ? s / denom : T(0);
  }
}

}  // namespace radt::kernels
