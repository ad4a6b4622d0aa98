#include "safer/kernels.hpp"

namespace safer::kernels {

namespace {

void add_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void div_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] / b[i];
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void clamp_scalar(const double* a, double lo, double hi, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        double v = a[i];
        if (v < lo) v = lo;
        if (v > hi) v = hi;
        out[i] = v;
    }
}

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double sum_scalar(const double* a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

double max_scalar(const double* a, std::size_t n) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

void gemm_nn_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

void gemm_tn_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table{
        "scalar",   add_scalar,  sub_scalar,  mul_scalar,     div_scalar,     axpy_scalar,   scale_scalar,
        clamp_scalar, dot_scalar, sum_scalar, max_scalar, gemm_nn_scalar, gemm_nt_scalar, gemm_tn_scalar,
    };
    return table;
}

}  // namespace safer::kernels
