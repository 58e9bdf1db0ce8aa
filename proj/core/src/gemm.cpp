#include "prat/gemm.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace prat::gemm {
namespace {

#if defined(__AVX512F__)

using vreg = __m512;
constexpr int kVW = 16;
inline vreg v_load(const float* p) { return _mm512_loadu_ps(p); }
inline vreg v_set1(float x) { return _mm512_set1_ps(x); }
inline vreg v_zero() { return _mm512_setzero_ps(); }
inline vreg v_fma(vreg a, vreg b, vreg c) { return _mm512_fmadd_ps(a, b, c); }
inline void v_store(float* p, vreg v) { _mm512_storeu_ps(p, v); }
inline float v_hsum(vreg v) { return _mm512_reduce_add_ps(v); }

#elif defined(__AVX2__) && defined(__FMA__)

using vreg = __m256;
constexpr int kVW = 8;
inline vreg v_load(const float* p) { return _mm256_loadu_ps(p); }
inline vreg v_set1(float x) { return _mm256_set1_ps(x); }
inline vreg v_zero() { return _mm256_setzero_ps(); }
inline vreg v_fma(vreg a, vreg b, vreg c) { return _mm256_fmadd_ps(a, b, c); }
inline void v_store(float* p, vreg v) { _mm256_storeu_ps(p, v); }
inline float v_hsum(vreg v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, sums);
  sums = _mm_add_ss(sums, sh);
  return _mm_cvtss_f32(sums);
}

#else

struct vreg {
  float v;
};
constexpr int kVW = 1;
inline vreg v_load(const float* p) { return {*p}; }
inline vreg v_set1(float x) { return {x}; }
inline vreg v_zero() { return {0.f}; }
inline vreg v_fma(vreg a, vreg b, vreg c) { return {a.v * b.v + c.v}; }
inline void v_store(float* p, vreg v) { *p = v.v; }
inline float v_hsum(vreg v) { return v.v; }

#endif

constexpr int kMR = 4;            // rows per microkernel
constexpr int kNB = 4 * kVW;      // columns per microkernel

// A is addressed through a stride pair so the same kernel serves both the
// nn layout (A[m*K+k]) and the tn layout (A[k*M+m]).
struct AView {
  const float* p;
  long row_stride;  // step between consecutive m
  long col_stride;  // step between consecutive k
  inline float at(int m, int k) const { return p[m * row_stride + k * col_stride]; }
};

template <int ROWS>
inline void kernel_bcast(int K, const AView& a, int m0, const float* B, int ldb,
                         float* C, int ldc, int j0, bool accumulate) {
  vreg acc[ROWS][4];
  for (int r = 0; r < ROWS; ++r) {
    if (accumulate) {
      for (int v = 0; v < 4; ++v) acc[r][v] = v_load(C + (m0 + r) * ldc + j0 + v * kVW);
    } else {
      for (int v = 0; v < 4; ++v) acc[r][v] = v_zero();
    }
  }
  for (int k = 0; k < K; ++k) {
    const float* brow = B + static_cast<long>(k) * ldb + j0;
    vreg b0 = v_load(brow);
    vreg b1 = v_load(brow + kVW);
    vreg b2 = v_load(brow + 2 * kVW);
    vreg b3 = v_load(brow + 3 * kVW);
    for (int r = 0; r < ROWS; ++r) {
      vreg ar = v_set1(a.at(m0 + r, k));
      acc[r][0] = v_fma(ar, b0, acc[r][0]);
      acc[r][1] = v_fma(ar, b1, acc[r][1]);
      acc[r][2] = v_fma(ar, b2, acc[r][2]);
      acc[r][3] = v_fma(ar, b3, acc[r][3]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    for (int v = 0; v < 4; ++v) v_store(C + (m0 + r) * ldc + j0 + v * kVW, acc[r][v]);
  }
}

// Scalar tail for columns that do not fill a register block.
inline void tail_bcast(int K, const AView& a, int m0, int rows, const float* B, int ldb,
                       float* C, int ldc, int j0, int j1, bool accumulate) {
  for (int r = 0; r < rows; ++r) {
    float* crow = C + (m0 + r) * ldc;
    if (!accumulate) {
      for (int j = j0; j < j1; ++j) crow[j] = 0.f;
    }
    for (int k = 0; k < K; ++k) {
      float av = a.at(m0 + r, k);
      const float* brow = B + static_cast<long>(k) * ldb;
      for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_bcast(int M, int N, int K, const AView& a, const float* B, float* C,
                bool accumulate) {
  const int nb = N / kNB;
  const bool top_level = !omp_in_parallel();
  if (nb >= 4 || M < kMR) {
    // parallel over column blocks: B panels are reused across row blocks
#pragma omp parallel for schedule(static) if (top_level)
    for (int jb = 0; jb < nb; ++jb) {
      const int j0 = jb * kNB;
      int m0 = 0;
      for (; m0 + kMR <= M; m0 += kMR) kernel_bcast<kMR>(K, a, m0, B, N, C, N, j0, accumulate);
      for (; m0 < M; ++m0) kernel_bcast<1>(K, a, m0, B, N, C, N, j0, accumulate);
    }
    if (N % kNB) tail_bcast(K, a, 0, M, B, N, C, N, nb * kNB, N, accumulate);
  } else {
    const int mblocks = (M + kMR - 1) / kMR;
#pragma omp parallel for schedule(static) if (top_level)
    for (int mb = 0; mb < mblocks; ++mb) {
      const int m0 = mb * kMR;
      const int rows = std::min(kMR, M - m0);
      int j0 = 0;
      if (rows == kMR) {
        for (; j0 + kNB <= N; j0 += kNB) kernel_bcast<kMR>(K, a, m0, B, N, C, N, j0, accumulate);
      } else {
        for (; j0 + kNB <= N; j0 += kNB) {
          for (int r = 0; r < rows; ++r) kernel_bcast<1>(K, a, m0 + r, B, N, C, N, j0, accumulate);
        }
      }
      if (j0 < N) tail_bcast(K, a, m0, rows, B, N, C, N, j0, N, accumulate);
    }
  }
}

template <int ROWS, int COLS>
inline void kernel_dot(int K, const float* A, int lda, int m0, const float* B, int ldb,
                       int n0, float* C, int ldc, bool accumulate) {
  vreg acc[ROWS][COLS];
  for (int r = 0; r < ROWS; ++r)
    for (int c = 0; c < COLS; ++c) acc[r][c] = v_zero();
  int k = 0;
  for (; k + kVW <= K; k += kVW) {
    vreg av[ROWS];
    for (int r = 0; r < ROWS; ++r) av[r] = v_load(A + (m0 + r) * static_cast<long>(lda) + k);
    for (int c = 0; c < COLS; ++c) {
      vreg bv = v_load(B + (n0 + c) * static_cast<long>(ldb) + k);
      for (int r = 0; r < ROWS; ++r) acc[r][c] = v_fma(av[r], bv, acc[r][c]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    for (int c = 0; c < COLS; ++c) {
      float s = v_hsum(acc[r][c]);
      const float* arow = A + (m0 + r) * static_cast<long>(lda);
      const float* brow = B + (n0 + c) * static_cast<long>(ldb);
      for (int kk = k; kk < K; ++kk) s += arow[kk] * brow[kk];
      float* cp = C + (m0 + r) * static_cast<long>(ldc) + n0 + c;
      *cp = accumulate ? *cp + s : s;
    }
  }
}

}  // namespace

void sgemm_nn(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate) {
  gemm_bcast(M, N, K, AView{A, K, 1}, B, C, accumulate);
}

void sgemm_tn(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate) {
  gemm_bcast(M, N, K, AView{A, 1, M}, B, C, accumulate);
}

void sgemm_nt(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate) {
  const bool top_level = !omp_in_parallel();
  const int mblocks = (M + kMR - 1) / kMR;
#pragma omp parallel for schedule(static) if (top_level)
  for (int mb = 0; mb < mblocks; ++mb) {
    const int m0 = mb * kMR;
    const int rows = std::min(kMR, M - m0);
    int n0 = 0;
    if (rows == kMR) {
      for (; n0 + 2 <= N; n0 += 2) kernel_dot<kMR, 2>(K, A, K, m0, B, K, n0, C, N, accumulate);
      for (; n0 < N; ++n0) kernel_dot<kMR, 1>(K, A, K, m0, B, K, n0, C, N, accumulate);
    } else {
      for (int r = 0; r < rows; ++r) {
        n0 = 0;
        for (; n0 + 2 <= N; n0 += 2) kernel_dot<1, 2>(K, A, K, m0 + r, B, K, n0, C, N, accumulate);
        for (; n0 < N; ++n0) kernel_dot<1, 1>(K, A, K, m0 + r, B, K, n0, C, N, accumulate);
      }
    }
  }
}

}  // namespace prat::gemm
