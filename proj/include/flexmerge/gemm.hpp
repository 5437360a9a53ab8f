#pragma once
// Deterministic single-threaded GEMM kernels. Floating-point contract: every
// output element is a sequential fold over k (ascending) of fma(a, b, acc)
// with one accumulator — the AVX-512 tiles and the scalar fallback produce
// bit-identical results. All matrices are row-major. The `0` variants start
// every fold from zero and overwrite C instead of accumulating into it.
#include <cstddef>
#include <cstdint>

namespace flexmerge {

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const float* A, const float* B, float* C, int M, int K, int N);

// C[M,N] += A[M,K] * B[N,K]^T   (B stored row-major as [N,K])
void gemm_nt(const float* A, const float* B, float* C, int M, int K, int N);

// C[K,N] += A[M,K]^T * B[M,N]   (reduction over rows of both; gradient GEMM)
void gemm_tn(const float* A, const float* B, float* C, int M, int K, int N);

// Overwriting counterparts (C = A*B etc.); same fold order from a zero start.
void gemm_nn0(const float* A, const float* B, float* C, int M, int K, int N);
void gemm_nt0(const float* A, const float* B, float* C, int M, int K, int N);
void gemm_tn0(const float* A, const float* B, float* C, int M, int K, int N);

// Strided variants (lda/ldb/ldc = row strides in elements) for slicing into
// larger buffers, e.g. per-head attention views. Same fold-order contract.
void gemm_nn_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N);
void gemm_nt_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N);
void gemm_tn_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N);
void gemm_nn0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N);
void gemm_nt0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N);
void gemm_tn0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N);

// Reference double-precision versions (plain loops, same fold order) used by
// the finite-difference oracle path.
void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_nn_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N);
void gemm_nt_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N);
void gemm_tn_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N);
void gemm_nn0(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_nt0(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_tn0(const double* A, const double* B, double* C, int M, int K, int N);
void gemm_nn0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N);
void gemm_nt0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N);
void gemm_tn0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N);

// Running FLOP counter (2*M*K*N per call), used for compute-budget audits.
uint64_t gemm_flop_count();
void gemm_flop_reset();

} // namespace flexmerge
