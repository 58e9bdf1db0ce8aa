#pragma once

namespace prat::gemm {

// Row-major single-precision matrix multiply kernels. Every output element
// is owned by exactly one thread and its reduction runs in a fixed order,
// so results are bitwise independent of the number of threads.
//
// Kernels parallelize internally only when not already inside an OpenMP
// parallel region; callers that parallelize at a coarser grain (per record,
// per image) get sequential kernels automatically.

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N]
void sgemm_nn(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate = false);

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[N,K]^T
void sgemm_nt(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate = false);

// C[M,N] = (accumulate ? C : 0) + A[K,M]^T * B[K,N]
void sgemm_tn(int M, int N, int K, const float* A, const float* B, float* C,
              bool accumulate = false);

}  // namespace prat::gemm
