#pragma once

#include <cstddef>
#include <string_view>

namespace safer::kernels {

// f64 inner-loop kernels behind a per-process dispatch table. Scalar versions
// are the reference semantics; the AVX2 variants must agree bit-for-bit on
// lanewise ops (no FMA there) and to tight relative error on reductions and
// GEMM, where lane reassociation changes the summation order.
//
// GEMM layout is row-major and all three variants accumulate into C:
//   gemm_nn: A[m x k] * B[k x n]      -> C[m x n] +=
//   gemm_nt: A[m x k] * B[n x k]^T    -> C[m x n] +=
//   gemm_tn: A[k x m]^T * B[k x n]    -> C[m x n] +=
struct Ops {
    const char* name;

    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*div)(const double* a, const double* b, double* out, std::size_t n);
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);  // y += alpha*x
    void (*scale)(double alpha, double* x, std::size_t n);                  // x *= alpha
    void (*clamp)(const double* a, double lo, double hi, double* out, std::size_t n);
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    double (*max)(const double* a, std::size_t n);  // n >= 1

    void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
    void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
    void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
};

const Ops& scalar_ops();
bool avx2_supported();        // compiled in and the CPU reports AVX2+FMA
const Ops& avx2_ops();        // valid only when avx2_supported()

// Active table; chosen once at first use (AVX2 when supported, else scalar).
const Ops& active();

// Test hook: "auto", "scalar" or "avx2". Throws ConfigError on unknown or
// unavailable backends.
void force_backend(std::string_view name);

}  // namespace safer::kernels
