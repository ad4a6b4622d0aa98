// AVX2 variants. This file is compiled with -mavx2 -mfma; callers must gate
// on avx2_supported() before touching this table.

#include "safer/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace safer::kernels {

namespace {

// Lanewise ops deliberately avoid FMA so they stay bit-identical to scalar.

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void div_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_div_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] / b[i];
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void clamp_avx2(const double* a, double lo, double hi, double* out, std::size_t n) {
    const __m256d vlo = _mm256_set1_pd(lo);
    const __m256d vhi = _mm256_set1_pd(hi);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_loadu_pd(a + i);
        v = _mm256_max_pd(v, vlo);
        v = _mm256_min_pd(v, vhi);
        _mm256_storeu_pd(out + i, v);
    }
    for (; i < n; ++i) {
        double v = a[i];
        if (v < lo) v = lo;
        if (v > hi) v = hi;
        out[i] = v;
    }
}

inline double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return hsum(acc) + tail;
}

double sum_avx2(const double* a, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i];
    return hsum(acc) + tail;
}

double max_avx2(const double* a, std::size_t n) {
    double m = a[0];
    std::size_t i = 0;
    if (n >= 4) {
        __m256d vm = _mm256_loadu_pd(a);
        for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(a + i));
        alignas(32) double lanes[4];
        _mm256_store_pd(lanes, vm);
        m = lanes[0];
        for (int l = 1; l < 4; ++l)
            if (lanes[l] > m) m = lanes[l];
    }
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

void gemm_nn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const __m256d av = _mm256_set1_pd(a[i * k + p]);
            const double* brow = b + p * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4)
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
            const double as = a[i * k + p];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

void gemm_nt_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            __m256d acc = _mm256_setzero_pd();
            std::size_t p = 0;
            for (; p + 4 <= k; p += 4)
                acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + p), _mm256_loadu_pd(brow + p), acc);
            double tail = 0.0;
            for (; p < k; ++p) tail += arow[p] * brow[p];
            c[i * n + j] += hsum(acc) + tail;
        }
    }
}

void gemm_tn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const __m256d av = _mm256_set1_pd(arow[i]);
            double* crow = c + i * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4)
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
            const double as = arow[i];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops table{
        "avx2",     add_avx2,  sub_avx2,  mul_avx2,     div_avx2,     axpy_avx2,   scale_avx2,
        clamp_avx2, dot_avx2,  sum_avx2,  max_avx2,     gemm_nn_avx2, gemm_nt_avx2, gemm_tn_avx2,
    };
    return table;
}

}  // namespace safer::kernels

#endif  // x86_64
