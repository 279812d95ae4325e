#ifndef KOALA_GEMM_HPP
#define KOALA_GEMM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace koala {

// Thread-count control. Results are bit-identical for any thread count
// because every output element has a single writer and a fixed accumulation
// order; the knob only trades wall time.
inline int& max_threads_ref() {
  static int n = 0;  // 0 = OpenMP default
  return n;
}
inline void set_max_threads(int n) { max_threads_ref() = n; }
inline int effective_threads() {
#ifdef _OPENMP
  if (omp_in_parallel()) return 1;
  int n = max_threads_ref();
  return n > 0 ? n : omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

// Row range [m0, m1) of C[M x N] (+)= A[M x K] * B[K x N], row-major.
// Four C rows per pass over B so B traffic amortizes; the j loop vectorizes
// and std::fma keeps rounding identical on every build.
template <typename T>
void gemm_nn_rows(int64_t m0, int64_t m1, int64_t N, int64_t K,
                  const T* A, const T* B, T* C) {
  int64_t i = m0;
  for (; i + 4 <= m1; i += 4) {
    T* c0 = C + (i + 0) * N;
    T* c1 = C + (i + 1) * N;
    T* c2 = C + (i + 2) * N;
    T* c3 = C + (i + 3) * N;
    const T* a0 = A + (i + 0) * K;
    const T* a1 = A + (i + 1) * K;
    const T* a2 = A + (i + 2) * K;
    const T* a3 = A + (i + 3) * K;
    for (int64_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      for (int64_t j = 0; j < N; ++j) {
        c0[j] = std::fma(v0, b[j], c0[j]);
        c1[j] = std::fma(v1, b[j], c1[j]);
        c2[j] = std::fma(v2, b[j], c2[j]);
        c3[j] = std::fma(v3, b[j], c3[j]);
      }
    }
  }
  for (; i < m1; ++i) {
    T* c0 = C + i * N;
    const T* a0 = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T v0 = a0[k];
      for (int64_t j = 0; j < N; ++j) c0[j] = std::fma(v0, b[j], c0[j]);
    }
  }
}

// Rows [m0, m1) of C[M x N] (+)= A[M x K] * B^T, with B stored [N x K].
// Dot-product kernel; k order fixed per output element.
template <typename T>
void gemm_nt_rows(int64_t m0, int64_t m1, int64_t N, int64_t K,
                  const T* A, const T* B, T* C) {
  for (int64_t i = m0; i < m1; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int64_t k = 0;
      for (; k + 4 <= K; k += 4) {
        s0 = std::fma(a[k + 0], b[k + 0], s0);
        s1 = std::fma(a[k + 1], b[k + 1], s1);
        s2 = std::fma(a[k + 2], b[k + 2], s2);
        s3 = std::fma(a[k + 3], b[k + 3], s3);
      }
      for (; k < K; ++k) s0 = std::fma(a[k], b[k], s0);
      c[j] += ((s0 + s1) + (s2 + s3));
    }
  }
}

// Rows [m0, m1) of C[M x N] (+)= A^T * B, with A stored [K x M], B [K x N].
template <typename T>
void gemm_tn_rows(int64_t m0, int64_t m1, int64_t M, int64_t N, int64_t K,
                  const T* A, const T* B, T* C) {
  int64_t i = m0;
  for (; i + 4 <= m1; i += 4) {
    T* c0 = C + (i + 0) * N;
    T* c1 = C + (i + 1) * N;
    T* c2 = C + (i + 2) * N;
    T* c3 = C + (i + 3) * N;
    for (int64_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T* arow = A + k * M;
      const T v0 = arow[i + 0], v1 = arow[i + 1], v2 = arow[i + 2], v3 = arow[i + 3];
      for (int64_t j = 0; j < N; ++j) {
        c0[j] = std::fma(v0, b[j], c0[j]);
        c1[j] = std::fma(v1, b[j], c1[j]);
        c2[j] = std::fma(v2, b[j], c2[j]);
        c3[j] = std::fma(v3, b[j], c3[j]);
      }
    }
  }
  for (; i < m1; ++i) {
    T* c0 = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T v0 = A[k * M + i];
      for (int64_t j = 0; j < N; ++j) c0[j] = std::fma(v0, b[j], c0[j]);
    }
  }
}

template <typename T, typename RowFn>
void parallel_rows(int64_t M, int64_t work, RowFn fn) {
  const int threads = effective_threads();
  if (threads <= 1 || work < 65536) {
    fn(int64_t(0), M);
    return;
  }
  const int64_t nblk = (M + 3) / 4;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
#endif
  for (int64_t blk = 0; blk < nblk; ++blk) {
    const int64_t r0 = blk * 4;
    const int64_t r1 = std::min<int64_t>(r0 + 4, M);
    fn(r0, r1);
  }
}

}  // namespace detail

// C[M x N] (+)= A[M x K] * B[K x N], all row-major.
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  if (M == 0 || N == 0 || K == 0) return;
  detail::parallel_rows<T>(M, M * N * K, [&](int64_t r0, int64_t r1) {
    detail::gemm_nn_rows(r0, r1, N, K, A, B, C);
  });
}

// C[M x N] (+)= A[M x K] * B^T where B is stored [N x K].
template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  if (M == 0 || N == 0 || K == 0) return;
  detail::parallel_rows<T>(M, M * N * K, [&](int64_t r0, int64_t r1) {
    detail::gemm_nt_rows(r0, r1, N, K, A, B, C);
  });
}

// C[M x N] (+)= A^T * B where A is stored [K x M], B is [K x N].
template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  if (M == 0 || N == 0 || K == 0) return;
  detail::parallel_rows<T>(M, M * N * K, [&](int64_t r0, int64_t r1) {
    detail::gemm_tn_rows(r0, r1, M, N, K, A, B, C);
  });
}

}  // namespace koala

#endif  // KOALA_GEMM_HPP
