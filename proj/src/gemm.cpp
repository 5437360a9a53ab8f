#include "flexmerge/gemm.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#if defined(__SSE3__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace flexmerge {

namespace {

#if defined(__SSE3__)
// Saturated softmax gates routinely produce subnormal floats, and subnormal
// arithmetic runs ~2 orders of magnitude slower on this hardware; nothing in
// the models needs magnitudes below ~1e-38, so flush them process-wide.
const bool g_flush_subnormals = [] {
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
    return true;
}();
#endif

uint64_t g_flops = 0;

// Strided primitives (lda/ldb/ldc = row strides in elements). Aliasing
// between C and A/B is not supported.

#if defined(__AVX512F__)

// Kernels are organized as column panels of NV 16-float vectors; the last
// vector of a TAIL panel is masked. Register-tile height shrinks as panels
// widen so accumulators plus operand vectors stay inside the register file.
template <int NV>
constexpr int tile_rows() {
    return NV == 4 ? 6 : NV == 3 ? 8 : NV == 2 ? 12 : 14;
}

// One panel of the NN product: C[0..M, 0..16*NV) (+)= A[0..M, 0..K) * B.
// Each output element keeps a single accumulator and folds k in ascending
// order, so results are bit-identical across tile heights and the scalar
// fallback. ZERO starts the fold from zero instead of the prior C value.
template <int NV, bool TAIL, bool ZERO>
void nn_panel(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int M, int K, __mmask16 tm) {
    constexpr int MR = tile_rows<NV>();
    auto loadv = [tm](const float* p, int v) {
        return (TAIL && v == NV - 1) ? _mm512_maskz_loadu_ps(tm, p + 16 * v)
                                     : _mm512_loadu_ps(p + 16 * v);
    };
    auto storev = [tm](float* p, int v, __m512 x) {
        if (TAIL && v == NV - 1)
            _mm512_mask_storeu_ps(p + 16 * v, tm, x);
        else
            _mm512_storeu_ps(p + 16 * v, x);
    };
    int i = 0;
    for (; i + MR <= M; i += MR) {
        __m512 acc[MR][NV];
        for (int r = 0; r < MR; ++r)
            for (int v = 0; v < NV; ++v)
                acc[r][v] = ZERO ? _mm512_setzero_ps() : loadv(C + (size_t)(i + r) * ldc, v);
        const float* a0 = A + (size_t)i * lda;
        int k = 0;
        for (; k + 2 <= K; k += 2) {
            const float* br0 = B + (size_t)k * ldb;
            const float* br1 = br0 + ldb;
            _mm_prefetch(reinterpret_cast<const char*>(br0 + 8 * (size_t)ldb), _MM_HINT_T0);
            if (NV > 1)
                _mm_prefetch(reinterpret_cast<const char*>(br0 + 8 * (size_t)ldb) + 64,
                             _MM_HINT_T0);
            __m512 b0[NV], b1[NV];
            for (int v = 0; v < NV; ++v) {
                b0[v] = loadv(br0, v);
                b1[v] = loadv(br1, v);
            }
            for (int r = 0; r < MR; ++r) {
                __m512 av = _mm512_set1_ps(a0[(size_t)r * lda + k]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(av, b0[v], acc[r][v]);
                __m512 aw = _mm512_set1_ps(a0[(size_t)r * lda + k + 1]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(aw, b1[v], acc[r][v]);
            }
        }
        for (; k < K; ++k) {
            const float* brow = B + (size_t)k * ldb;
            __m512 bv[NV];
            for (int v = 0; v < NV; ++v) bv[v] = loadv(brow, v);
            for (int r = 0; r < MR; ++r) {
                __m512 av = _mm512_set1_ps(a0[(size_t)r * lda + k]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
            }
        }
        for (int r = 0; r < MR; ++r)
            for (int v = 0; v < NV; ++v) storev(C + (size_t)(i + r) * ldc, v, acc[r][v]);
    }
    for (; i < M; ++i) {
        __m512 acc1[NV];
        for (int v = 0; v < NV; ++v)
            acc1[v] = ZERO ? _mm512_setzero_ps() : loadv(C + (size_t)i * ldc, v);
        const float* arow = A + (size_t)i * lda;
        int k = 0;
        for (; k + 2 <= K; k += 2) {
            const float* br0 = B + (size_t)k * ldb;
            const float* br1 = br0 + ldb;
            __m512 av = _mm512_set1_ps(arow[k]);
            __m512 aw = _mm512_set1_ps(arow[k + 1]);
            for (int v = 0; v < NV; ++v) {
                acc1[v] = _mm512_fmadd_ps(av, loadv(br0, v), acc1[v]);
                acc1[v] = _mm512_fmadd_ps(aw, loadv(br1, v), acc1[v]);
            }
        }
        for (; k < K; ++k) {
            const float* brow = B + (size_t)k * ldb;
            __m512 av = _mm512_set1_ps(arow[k]);
            for (int v = 0; v < NV; ++v) acc1[v] = _mm512_fmadd_ps(av, loadv(brow, v), acc1[v]);
        }
        for (int v = 0; v < NV; ++v) storev(C + (size_t)i * ldc, v, acc1[v]);
    }
}

// One panel of the A^T*B reduction over rows m0..m1 (ascending m keeps the
// per-element fold order fixed across the caller's m-chunking). ZERO starts
// the fold from zero (used for the first m-chunk only).
template <int NV, bool TAIL, bool ZERO>
void tn_panel(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int m0, int m1, int K, __mmask16 tm) {
    constexpr int KR = tile_rows<NV>();
    auto loadv = [tm](const float* p, int v) {
        return (TAIL && v == NV - 1) ? _mm512_maskz_loadu_ps(tm, p + 16 * v)
                                     : _mm512_loadu_ps(p + 16 * v);
    };
    auto storev = [tm](float* p, int v, __m512 x) {
        if (TAIL && v == NV - 1)
            _mm512_mask_storeu_ps(p + 16 * v, tm, x);
        else
            _mm512_storeu_ps(p + 16 * v, x);
    };
    int kq = 0;
    for (; kq + KR <= K; kq += KR) {
        __m512 acc[KR][NV];
        for (int r = 0; r < KR; ++r)
            for (int v = 0; v < NV; ++v)
                acc[r][v] = ZERO ? _mm512_setzero_ps() : loadv(C + (size_t)(kq + r) * ldc, v);
        int m = m0;
        for (; m + 2 <= m1; m += 2) {
            const float* ar0 = A + (size_t)m * lda + kq;
            const float* br0 = B + (size_t)m * ldb;
            const float* br1 = br0 + ldb;
            _mm_prefetch(reinterpret_cast<const char*>(br0 + 8 * (size_t)ldb), _MM_HINT_T0);
            if (NV > 1)
                _mm_prefetch(reinterpret_cast<const char*>(br0 + 8 * (size_t)ldb) + 64,
                             _MM_HINT_T0);
            _mm_prefetch(reinterpret_cast<const char*>(ar0 + 8 * (size_t)lda), _MM_HINT_T0);
            __m512 b0[NV], b1[NV];
            for (int v = 0; v < NV; ++v) {
                b0[v] = loadv(br0, v);
                b1[v] = loadv(br1, v);
            }
            for (int r = 0; r < KR; ++r) {
                __m512 av = _mm512_set1_ps(ar0[r]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(av, b0[v], acc[r][v]);
                __m512 aw = _mm512_set1_ps(ar0[lda + r]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(aw, b1[v], acc[r][v]);
            }
        }
        for (; m < m1; ++m) {
            const float* arow = A + (size_t)m * lda + kq;
            const float* brow = B + (size_t)m * ldb;
            __m512 bv[NV];
            for (int v = 0; v < NV; ++v) bv[v] = loadv(brow, v);
            for (int r = 0; r < KR; ++r) {
                __m512 av = _mm512_set1_ps(arow[r]);
                for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
            }
        }
        for (int r = 0; r < KR; ++r)
            for (int v = 0; v < NV; ++v) storev(C + (size_t)(kq + r) * ldc, v, acc[r][v]);
    }
    for (; kq < K; ++kq) {
        __m512 acc1[NV];
        for (int v = 0; v < NV; ++v)
            acc1[v] = ZERO ? _mm512_setzero_ps() : loadv(C + (size_t)kq * ldc, v);
        int m = m0;
        for (; m + 2 <= m1; m += 2) {
            const float* br0 = B + (size_t)m * ldb;
            const float* br1 = br0 + ldb;
            __m512 av = _mm512_set1_ps(A[(size_t)m * lda + kq]);
            __m512 aw = _mm512_set1_ps(A[(size_t)(m + 1) * lda + kq]);
            for (int v = 0; v < NV; ++v) {
                acc1[v] = _mm512_fmadd_ps(av, loadv(br0, v), acc1[v]);
                acc1[v] = _mm512_fmadd_ps(aw, loadv(br1, v), acc1[v]);
            }
        }
        for (; m < m1; ++m) {
            const float* brow = B + (size_t)m * ldb;
            __m512 av = _mm512_set1_ps(A[(size_t)m * lda + kq]);
            for (int v = 0; v < NV; ++v) acc1[v] = _mm512_fmadd_ps(av, loadv(brow, v), acc1[v]);
        }
        for (int v = 0; v < NV; ++v) storev(C + (size_t)kq * ldc, v, acc1[v]);
    }
}

template <bool ZERO>
void nn_drive(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int M, int K, int N) {
    int j = 0;
    for (; j + 64 <= N; j += 64)
        nn_panel<4, false, ZERO>(A, lda, B + j, ldb, C + j, ldc, M, K, (__mmask16)0xFFFF);
    int rem = N - j;
    if (rem == 0) return;
    int nv = (rem + 15) / 16;
    int last = rem - 16 * (nv - 1);
    bool full = (last == 16);
    __mmask16 tm = full ? (__mmask16)0xFFFF : (__mmask16)((1u << last) - 1u);
    const float* Bp = B + j;
    float* Cp = C + j;
    switch (nv) {
        case 1:
            full ? nn_panel<1, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm)
                 : nn_panel<1, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm);
            break;
        case 2:
            full ? nn_panel<2, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm)
                 : nn_panel<2, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm);
            break;
        case 3:
            full ? nn_panel<3, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm)
                 : nn_panel<3, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm);
            break;
        default:
            // rem in (48, 64): always masked since full 64-wide panels are
            // handled by the loop above.
            nn_panel<4, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, M, K, tm);
            break;
    }
}

template <bool ZERO>
void tn_chunk(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int m0, int m1, int K, int N) {
    int j = 0;
    for (; j + 64 <= N; j += 64)
        tn_panel<4, false, ZERO>(A, lda, B + j, ldb, C + j, ldc, m0, m1, K, (__mmask16)0xFFFF);
    int rem = N - j;
    if (rem == 0) return;
    int nv = (rem + 15) / 16;
    int last = rem - 16 * (nv - 1);
    bool full = (last == 16);
    __mmask16 tm = full ? (__mmask16)0xFFFF : (__mmask16)((1u << last) - 1u);
    const float* Bp = B + j;
    float* Cp = C + j;
    switch (nv) {
        case 1:
            full ? tn_panel<1, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm)
                 : tn_panel<1, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm);
            break;
        case 2:
            full ? tn_panel<2, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm)
                 : tn_panel<2, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm);
            break;
        case 3:
            full ? tn_panel<3, false, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm)
                 : tn_panel<3, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm);
            break;
        default:
            tn_panel<4, true, ZERO>(A, lda, Bp, ldb, Cp, ldc, m0, m1, K, tm);
            break;
    }
}

#else // scalar fallback: identical fold order and fused rounding via std::fma

template <bool ZERO>
void nn_drive(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            float acc = ZERO ? 0.0f : C[(size_t)i * ldc + j];
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * lda + k], B[(size_t)k * ldb + j], acc);
            C[(size_t)i * ldc + j] = acc;
        }
}

template <bool ZERO>
void tn_chunk(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int m0, int m1, int K, int N) {
    for (int kq = 0; kq < K; ++kq)
        for (int j = 0; j < N; ++j) {
            float acc = ZERO ? 0.0f : C[(size_t)kq * ldc + j];
            for (int m = m0; m < m1; ++m)
                acc = std::fma(A[(size_t)m * lda + kq], B[(size_t)m * ldb + j], acc);
            C[(size_t)kq * ldc + j] = acc;
        }
}

#endif

template <bool ZERO>
void tn_drive(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int M, int K, int N) {
    // m-blocked so the streamed A/B chunks stay cache-resident per C pass;
    // when ZERO, only the first chunk starts its folds from zero.
    constexpr int MC = 320;
    if (ZERO && M == 0) {
        for (int kq = 0; kq < K; ++kq) std::fill(C + (size_t)kq * ldc, C + (size_t)kq * ldc + N, 0.0f);
        return;
    }
    for (int m0 = 0; m0 < M; m0 += MC) {
        int m1 = std::min(m0 + MC, M);
        if (ZERO && m0 == 0)
            tn_chunk<true>(A, lda, B, ldb, C, ldc, m0, m1, K, N);
        else
            tn_chunk<false>(A, lda, B, ldb, C, ldc, m0, m1, K, N);
    }
}

// Scratch for materializing B^T in the NT path (small weight matrices).
thread_local std::vector<float> g_nt_scratch;

// B^T pack: column-blocked so the strided source reads of one block stay on
// a hot set of cache lines while the destination is written contiguously.
void nt_pack(const float* B, int ldb, float* Bt, int K, int N) {
    constexpr int JB = 64;
    for (int j0 = 0; j0 < N; j0 += JB) {
        int j1 = std::min(j0 + JB, N);
        for (int k = 0; k < K; ++k) {
            float* dst = Bt + (size_t)k * N;
            const float* src = B + k;
            for (int j = j0; j < j1; ++j) dst[j] = src[(size_t)j * ldb];
        }
    }
}

template <bool ZERO>
void nt_drive(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
              int M, int K, int N) {
    // Transpose B ([N,K] rows at stride ldb -> contiguous [K,N]) once, then run
    // the NN tile; the per-element fold order is unchanged.
    g_nt_scratch.resize((size_t)K * N);
    float* Bt = g_nt_scratch.data();
    nt_pack(B, ldb, Bt, K, N);
    nn_drive<ZERO>(A, lda, Bt, N, C, ldc, M, K, N);
}

} // namespace

void gemm_nn(const float* A, const float* B, float* C, int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nn_drive<false>(A, K, B, N, C, N, M, K, N);
}

void gemm_nt(const float* A, const float* B, float* C, int M, int K, int N) {
    gemm_nt_strided(A, K, B, K, C, N, M, K, N);
}

void gemm_tn(const float* A, const float* B, float* C, int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    tn_drive<false>(A, K, B, N, C, N, M, K, N);
}

void gemm_nn0(const float* A, const float* B, float* C, int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nn_drive<true>(A, K, B, N, C, N, M, K, N);
}

void gemm_tn0(const float* A, const float* B, float* C, int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    tn_drive<true>(A, K, B, N, C, N, M, K, N);
}

void gemm_nt0(const float* A, const float* B, float* C, int M, int K, int N) {
    gemm_nt0_strided(A, K, B, K, C, N, M, K, N);
}

void gemm_nn_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nn_drive<false>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_nt_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nt_drive<false>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_tn_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                     int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    tn_drive<false>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_tn0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    tn_drive<true>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_nn0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nn_drive<true>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_nt0_strided(const float* A, int lda, const float* B, int ldb, float* C, int ldc,
                      int M, int K, int N) {
    g_flops += 2ull * M * K * N;
    nt_drive<true>(A, lda, B, ldb, C, ldc, M, K, N);
}

void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)i * N + j];
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * K + k], B[(size_t)k * N + j], acc);
            C[(size_t)i * N + j] = acc;
        }
}

void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)i * N + j];
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * K + k], B[(size_t)j * K + k], acc);
            C[(size_t)i * N + j] = acc;
        }
}

void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int kq = 0; kq < K; ++kq)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)kq * N + j];
            for (int m = 0; m < M; ++m)
                acc = std::fma(A[(size_t)m * K + kq], B[(size_t)m * N + j], acc);
            C[(size_t)kq * N + j] = acc;
        }
}

void gemm_nn0(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * K + k], B[(size_t)k * N + j], acc);
            C[(size_t)i * N + j] = acc;
        }
}

void gemm_nt0(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * K + k], B[(size_t)j * K + k], acc);
            C[(size_t)i * N + j] = acc;
        }
}

void gemm_tn0(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int kq = 0; kq < K; ++kq)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int m = 0; m < M; ++m)
                acc = std::fma(A[(size_t)m * K + kq], B[(size_t)m * N + j], acc);
            C[(size_t)kq * N + j] = acc;
        }
}

void gemm_nn_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)i * ldc + j];
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * lda + k], B[(size_t)k * ldb + j], acc);
            C[(size_t)i * ldc + j] = acc;
        }
}

void gemm_nt_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)i * ldc + j];
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * lda + k], B[(size_t)j * ldb + k], acc);
            C[(size_t)i * ldc + j] = acc;
        }
}

void gemm_tn_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                     int M, int K, int N) {
    for (int kq = 0; kq < K; ++kq)
        for (int j = 0; j < N; ++j) {
            double acc = C[(size_t)kq * ldc + j];
            for (int m = 0; m < M; ++m)
                acc = std::fma(A[(size_t)m * lda + kq], B[(size_t)m * ldb + j], acc);
            C[(size_t)kq * ldc + j] = acc;
        }
}

void gemm_nn0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * lda + k], B[(size_t)k * ldb + j], acc);
            C[(size_t)i * ldc + j] = acc;
        }
}

void gemm_nt0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc = std::fma(A[(size_t)i * lda + k], B[(size_t)j * ldb + k], acc);
            C[(size_t)i * ldc + j] = acc;
        }
}

void gemm_tn0_strided(const double* A, int lda, const double* B, int ldb, double* C, int ldc,
                      int M, int K, int N) {
    for (int kq = 0; kq < K; ++kq)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int m = 0; m < M; ++m)
                acc = std::fma(A[(size_t)m * lda + kq], B[(size_t)m * ldb + j], acc);
            C[(size_t)kq * ldc + j] = acc;
        }
}

uint64_t gemm_flop_count() { return g_flops; }
void gemm_flop_reset() { g_flops = 0; }

} // namespace flexmerge
