#pragma once

// Dense arithmetic kernels with a scalar reference path and an AVX2/FMA path
// selected once at startup. Every vectorized kernel has a scalar twin with
// the same signature; tests/unit/test_simd.cpp checks them for equivalence.

#include <cstddef>
#include <string_view>

namespace maskgan::simd {

enum class Level { Scalar, Avx2 };

std::string_view level_name(Level level);

/// Highest level this CPU supports and this binary was built with.
Level detect_level();

/// Level currently used by the dispatching entry points below. Defaults to
/// detect_level(), overridable with MASKGAN_SIMD=scalar|avx2.
Level active_level();

/// Forces a level (tests use this to pin the scalar path). Requesting a level
/// the CPU does not support falls back to Scalar.
void set_level(Level level);

// C[M x N] (+)= A[M x K] * B[K x N], all row-major with explicit leading dims.
struct GemmArgs {
    std::size_t m = 0, n = 0, k = 0;
    const float* a = nullptr;
    std::size_t lda = 0;
    const float* b = nullptr;
    std::size_t ldb = 0;
    float* c = nullptr;
    std::size_t ldc = 0;
    bool accumulate = false;
};

struct KernelTable {
    void (*gemm)(const GemmArgs&);
    // C[M x N] (+)= A[M x K] * B^T with B stored N x K; dot-product form for long K.
    void (*gemm_nt)(const GemmArgs&);
    void (*axpy)(std::size_t n, float alpha, const float* x, float* y);
    float (*dot)(std::size_t n, const float* x, const float* y);
    float (*sum)(std::size_t n, const float* x);
    void (*scale_shift)(std::size_t n, float scale, float shift, const float* x, float* y);
};

const KernelTable& scalar_kernels();
const KernelTable& avx2_kernels();  // equals scalar_kernels() when not compiled in
const KernelTable& kernels();       // the active table

// Convenience wrappers over kernels().
void gemm(const GemmArgs& args);
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
          std::size_t ldb, float* c, std::size_t ldc, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
             std::size_t ldb, float* c, std::size_t ldc, bool accumulate);
void axpy(std::size_t n, float alpha, const float* x, float* y);
float dot(std::size_t n, const float* x, const float* y);
float sum(std::size_t n, const float* x);
void scale_shift(std::size_t n, float scale, float shift, const float* x, float* y);

// Double-precision overloads are scalar only; the f64 build of the library
// uses them for gradient checking.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
void axpy(std::size_t n, double alpha, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);
double sum(std::size_t n, const double* x);
void scale_shift(std::size_t n, double scale, double shift, const double* x, double* y);

}  // namespace maskgan::simd
