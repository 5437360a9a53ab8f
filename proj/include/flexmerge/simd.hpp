#pragma once
// Row-level math kernels for the float graph path: a vectorized exp and the
// reduction helpers (max / sum / dot) the compiler will not auto-vectorize
// under strict FP semantics. Double overloads keep the plain serial forms so
// the 64-bit reference graphs behave exactly like straightforward loops, and
// a scalar fallback covers non-AVX-512 builds.
#include <algorithm>
#include <cmath>
#include <cstdint>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace flexmerge::detail {

#if defined(__AVX512F__)

// exp(x) with Cody-Waite range reduction and a degree-5 polynomial on the
// reduced interval; scalef applies 2^n with graceful underflow. Relative
// error vs libm is ~1 ulp, far inside every tolerance used by the models.
inline __m512 vexp_ps(__m512 x) {
    const __m512 log2e = _mm512_set1_ps(1.44269504088896341f);
    const __m512 ln2_hi = _mm512_set1_ps(0.693359375f);
    const __m512 ln2_lo = _mm512_set1_ps(-2.12194440e-4f);
    x = _mm512_max_ps(x, _mm512_set1_ps(-104.0f));
    x = _mm512_min_ps(x, _mm512_set1_ps(88.72283f));
    __m512 n = _mm512_roundscale_ps(_mm512_mul_ps(x, log2e),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512 r = _mm512_fnmadd_ps(n, ln2_hi, x);
    r = _mm512_fnmadd_ps(n, ln2_lo, r);
    __m512 p = _mm512_set1_ps(1.9875691500e-4f);
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
    __m512 r2 = _mm512_mul_ps(r, r);
    p = _mm512_fmadd_ps(p, r2, r);
    p = _mm512_add_ps(p, _mm512_set1_ps(1.0f));
    return _mm512_scalef_ps(p, n);
}

inline float row_max(const float* x, int n) {
    if (n < 16) {
        float m = x[0];
        for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
        return m;
    }
    __m512 vm = _mm512_loadu_ps(x);
    int i = 16;
    for (; i + 16 <= n; i += 16) vm = _mm512_max_ps(vm, _mm512_loadu_ps(x + i));
    float m = _mm512_reduce_max_ps(vm);
    for (; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

// y[i] = exp(x[i] - m); returns the sum of y.
inline float exp_row_shift(const float* x, float* y, int n, float m) {
    const __m512 vm = _mm512_set1_ps(m);
    __m512 vs = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        __m512 e = vexp_ps(_mm512_sub_ps(_mm512_loadu_ps(x + i), vm));
        _mm512_storeu_ps(y + i, e);
        vs = _mm512_add_ps(vs, e);
    }
    float sum = _mm512_reduce_add_ps(vs);
    int rem = n - i;
    if (rem > 0) {
        __mmask16 mk = (__mmask16)((1u << rem) - 1u);
        __m512 e = vexp_ps(_mm512_sub_ps(_mm512_maskz_loadu_ps(mk, x + i), vm));
        _mm512_mask_storeu_ps(y + i, mk, e);
        sum += _mm512_reduce_add_ps(_mm512_maskz_mov_ps(mk, e));
    }
    return sum;
}

// y[i] = exp(x[i] * scale - m); returns the sum of y.
inline float exp_row_scaled(const float* x, float* y, int n, float scale, float m) {
    const __m512 vm = _mm512_set1_ps(m);
    const __m512 vc = _mm512_set1_ps(scale);
    __m512 vs = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        __m512 t = _mm512_sub_ps(_mm512_mul_ps(_mm512_loadu_ps(x + i), vc), vm);
        __m512 e = vexp_ps(t);
        _mm512_storeu_ps(y + i, e);
        vs = _mm512_add_ps(vs, e);
    }
    float sum = _mm512_reduce_add_ps(vs);
    int rem = n - i;
    if (rem > 0) {
        __mmask16 mk = (__mmask16)((1u << rem) - 1u);
        __m512 t = _mm512_sub_ps(_mm512_mul_ps(_mm512_maskz_loadu_ps(mk, x + i), vc), vm);
        __m512 e = vexp_ps(t);
        _mm512_mask_storeu_ps(y + i, mk, e);
        sum += _mm512_reduce_add_ps(_mm512_maskz_mov_ps(mk, e));
    }
    return sum;
}

inline float dot_row(const float* a, const float* b, int n) {
    __m512 acc = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16)
        acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc);
    float s = _mm512_reduce_add_ps(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline float row_sum(const float* x, int n) {
    __m512 acc = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) acc = _mm512_add_ps(acc, _mm512_loadu_ps(x + i));
    float s = _mm512_reduce_add_ps(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

// sum of (x[i] - mean)^2
inline float row_center_sqsum(const float* x, int n, float mean) {
    const __m512 vm = _mm512_set1_ps(mean);
    __m512 acc = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        __m512 d = _mm512_sub_ps(_mm512_loadu_ps(x + i), vm);
        acc = _mm512_fmadd_ps(d, d, acc);
    }
    float s = _mm512_reduce_add_ps(acc);
    for (; i < n; ++i) {
        float d = x[i] - mean;
        s += d * d;
    }
    return s;
}

// mg = sum(dy*gain), mgx = sum(dy*gain*(x-mean)*inv) — the two reductions of
// the layer-norm input gradient.
inline void ln_bwd_dots(const float* x, const float* dy, const float* gain, int n, float mean,
                        float inv, float& mg, float& mgx) {
    const __m512 vm = _mm512_set1_ps(mean);
    const __m512 vi = _mm512_set1_ps(inv);
    __m512 ag = _mm512_setzero_ps(), agx = _mm512_setzero_ps();
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        __m512 g = _mm512_mul_ps(_mm512_loadu_ps(dy + i), _mm512_loadu_ps(gain + i));
        __m512 xh = _mm512_mul_ps(_mm512_sub_ps(_mm512_loadu_ps(x + i), vm), vi);
        ag = _mm512_add_ps(ag, g);
        agx = _mm512_fmadd_ps(g, xh, agx);
    }
    float sg = _mm512_reduce_add_ps(ag);
    float sgx = _mm512_reduce_add_ps(agx);
    for (; i < n; ++i) {
        float g = dy[i] * gain[i];
        float xh = (x[i] - mean) * inv;
        sg += g;
        sgx += g * xh;
    }
    mg = sg;
    mgx = sgx;
}

#else // scalar fallbacks

inline float row_max(const float* x, int n) {
    float m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

inline float exp_row_shift(const float* x, float* y, int n, float m) {
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        sum += y[i];
    }
    return sum;
}

inline float exp_row_scaled(const float* x, float* y, int n, float scale, float m) {
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] * scale - m);
        sum += y[i];
    }
    return sum;
}

inline float dot_row(const float* a, const float* b, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline float row_sum(const float* x, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; ++i) s += x[i];
    return s;
}

inline float row_center_sqsum(const float* x, int n, float mean) {
    float s = 0.0f;
    for (int i = 0; i < n; ++i) {
        float d = x[i] - mean;
        s += d * d;
    }
    return s;
}

inline void ln_bwd_dots(const float* x, const float* dy, const float* gain, int n, float mean,
                        float inv, float& mg, float& mgx) {
    float sg = 0.0f, sgx = 0.0f;
    for (int i = 0; i < n; ++i) {
        float g = dy[i] * gain[i];
        float xh = (x[i] - mean) * inv;
        sg += g;
        sgx += g * xh;
    }
    mg = sg;
    mgx = sgx;
}

#endif

// 64-bit overloads stay plain serial loops: the reference graphs are the
// yardstick the float engine is checked against, so they must remain the
// most literal implementation possible.

inline double row_max(const double* x, int n) {
    double m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

inline double exp_row_shift(const double* x, double* y, int n, double m) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        sum += y[i];
    }
    return sum;
}

inline double exp_row_scaled(const double* x, double* y, int n, double scale, double m) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] * scale - m);
        sum += y[i];
    }
    return sum;
}

inline double dot_row(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double row_sum(const double* x, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[i];
    return s;
}

inline double row_center_sqsum(const double* x, int n, double mean) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = x[i] - mean;
        s += d * d;
    }
    return s;
}

inline void ln_bwd_dots(const double* x, const double* dy, const double* gain, int n, double mean,
                        double inv, double& mg, double& mgx) {
    double sg = 0.0, sgx = 0.0;
    for (int i = 0; i < n; ++i) {
        double g = dy[i] * gain[i];
        double xh = (x[i] - mean) * inv;
        sg += g;
        sgx += g * xh;
    }
    mg = sg;
    mgx = sgx;
}

} // namespace flexmerge::detail
