#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#if defined(__AVX512F__) && defined(__AVX512VL__)
#include <immintrin.h>
#define RVP_GEMM_AVX512 1
#elif defined(__AVX2__)
#include <immintrin.h>
#define RVP_GEMM_AVX2 1
#endif

namespace rvp {

// C[M,N] = A[M,K] * B[K,N] (row-major f32). Accumulation happens in f64 and
// is rounded to f32 once per output element; with accumulate=true the prior
// C value joins the f64 sum instead of being overwritten.
//
// Layout: process 32-column panels of B. Each panel is converted to f64 once
// and stays hot in L1/L2 while all M rows stream through it, so the inner
// loop is pure broadcast+FMA work. The f32->f64 conversion overhead is
// O(MN/32 + MK·N/32) ~ flops/64, which is noise.
inline void gemm(const float* A, const float* B, float* C, int64_t M,
                 int64_t K, int64_t N, bool accumulate = false) {
#if defined(RVP_GEMM_AVX512)
  constexpr int64_t JB = 32;
  thread_local std::vector<double> bpan, arow, aall;
  bpan.resize(size_t(K) * JB);
  arow.resize(static_cast<size_t>(K));
  // Converting A once (instead of once per 32-column panel) is worth ~30%
  // on the narrow-N shapes; skip it when the f64 copy would be huge.
  const bool pre = M * K <= (int64_t(4) << 20);
  if (pre) {
    aall.resize(size_t(M) * size_t(K));
    for (int64_t i = 0; i < M * K; ++i) aall[size_t(i)] = double(A[i]);
  }
  for (int64_t j0 = 0; j0 < N; j0 += JB) {
    const int64_t jw = std::min(JB, N - j0);
    for (int64_t k = 0; k < K; ++k) {
      const float* brow = B + k * N + j0;
      double* dst = bpan.data() + k * JB;
      int64_t jj = 0;
      for (; jj < jw; ++jj) dst[jj] = double(brow[jj]);
      for (; jj < JB; ++jj) dst[jj] = 0.0;
    }
    __mmask8 m0 = __mmask8((jw >= 8) ? 0xff : ((1u << jw) - 1));
    __mmask8 m1 = __mmask8((jw >= 16) ? 0xff : (jw > 8 ? (1u << (jw - 8)) - 1 : 0));
    __mmask8 m2 = __mmask8((jw >= 24) ? 0xff : (jw > 16 ? (1u << (jw - 16)) - 1 : 0));
    __mmask8 m3 = __mmask8((jw >= 32) ? 0xff : (jw > 24 ? (1u << (jw - 24)) - 1 : 0));
    for (int64_t i = 0; i < M; ++i) {
      const double* ad;
      if (pre) {
        ad = aall.data() + i * K;
      } else {
        const float* ar = A + i * K;
        for (int64_t k = 0; k < K; ++k) arow[size_t(k)] = double(ar[k]);
        ad = arow.data();
      }
      float* crow = C + i * N + j0;
      __m512d a0, a1, a2, a3;
      if (accumulate) {
        a0 = _mm512_cvtps_pd(_mm256_maskz_loadu_ps(m0, crow));
        a1 = _mm512_cvtps_pd(_mm256_maskz_loadu_ps(m1, crow + 8));
        a2 = _mm512_cvtps_pd(_mm256_maskz_loadu_ps(m2, crow + 16));
        a3 = _mm512_cvtps_pd(_mm256_maskz_loadu_ps(m3, crow + 24));
      } else {
        a0 = a1 = a2 = a3 = _mm512_setzero_pd();
      }
      const double* bp = bpan.data();
      for (int64_t k = 0; k < K; ++k, bp += JB) {
        __m512d av = _mm512_set1_pd(ad[k]);
        a0 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bp), a0);
        a1 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bp + 8), a1);
        a2 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bp + 16), a2);
        a3 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bp + 24), a3);
      }
      _mm256_mask_storeu_ps(crow, m0, _mm512_cvtpd_ps(a0));
      _mm256_mask_storeu_ps(crow + 8, m1, _mm512_cvtpd_ps(a1));
      _mm256_mask_storeu_ps(crow + 16, m2, _mm512_cvtpd_ps(a2));
      _mm256_mask_storeu_ps(crow + 24, m3, _mm512_cvtpd_ps(a3));
    }
  }
#elif defined(RVP_GEMM_AVX2)
  constexpr int64_t JB = 16;
  thread_local std::vector<double> bpan, arow;
  bpan.resize(size_t(K) * JB);
  arow.resize(static_cast<size_t>(K));
  for (int64_t j0 = 0; j0 < N; j0 += JB) {
    const int64_t jw = std::min(JB, N - j0);
    for (int64_t k = 0; k < K; ++k) {
      const float* brow = B + k * N + j0;
      double* dst = bpan.data() + k * JB;
      int64_t jj = 0;
      for (; jj < jw; ++jj) dst[jj] = double(brow[jj]);
      for (; jj < JB; ++jj) dst[jj] = 0.0;
    }
    for (int64_t i = 0; i < M; ++i) {
      const float* ar = A + i * K;
      for (int64_t k = 0; k < K; ++k) arow[k] = double(ar[k]);
      float* crow = C + i * N + j0;
      alignas(32) double acc[JB];
      for (int64_t jj = 0; jj < JB; ++jj)
        acc[jj] = (accumulate && jj < jw) ? double(crow[jj]) : 0.0;
      __m256d a0 = _mm256_load_pd(acc), a1 = _mm256_load_pd(acc + 4);
      __m256d a2 = _mm256_load_pd(acc + 8), a3 = _mm256_load_pd(acc + 12);
      const double* bp = bpan.data();
      for (int64_t k = 0; k < K; ++k, bp += JB) {
        __m256d av = _mm256_set1_pd(arow[k]);
        a0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), a0);
        a1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), a1);
        a2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 8), a2);
        a3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 12), a3);
      }
      _mm256_store_pd(acc, a0);
      _mm256_store_pd(acc + 4, a1);
      _mm256_store_pd(acc + 8, a2);
      _mm256_store_pd(acc + 12, a3);
      for (int64_t jj = 0; jj < jw; ++jj) crow[jj] = float(acc[jj]);
    }
  }
#else
  thread_local std::vector<double> rowacc;
  rowacc.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < M; ++i) {
    float* crow = C + i * N;
    for (int64_t j = 0; j < N; ++j)
      rowacc[j] = accumulate ? double(crow[j]) : 0.0;
    const float* arow_p = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double a = double(arow_p[k]);
      const float* brow = B + k * N;
      for (int64_t j = 0; j < N; ++j) rowacc[j] += a * double(brow[j]);
    }
    for (int64_t j = 0; j < N; ++j) crow[j] = float(rowacc[j]);
  }
#endif
}

// dst[C,R] = transpose of src[R,C]. Blocked for cache friendliness.
inline void transpose_2d(const float* src, float* dst, int64_t R, int64_t C) {
  constexpr int64_t BS = 32;
  for (int64_t r0 = 0; r0 < R; r0 += BS) {
    const int64_t r1 = std::min(r0 + BS, R);
    for (int64_t c0 = 0; c0 < C; c0 += BS) {
      const int64_t c1 = std::min(c0 + BS, C);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) dst[c * R + r] = src[r * C + c];
    }
  }
}

}  // namespace rvp
