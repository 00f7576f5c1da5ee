#include "maskgan/simd/kernels.hpp"

#include <cstring>

namespace maskgan::simd {
namespace {

template <typename T>
void gemm_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
              const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (!accumulate) std::memset(crow, 0, n * sizeof(T));
        const T* arow = a + i * lda;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                 const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[j * ldb + p];
            c[i * ldc + j] = accumulate ? c[i * ldc + j] + acc : acc;
        }
}

template <typename T>
void axpy_ref(std::size_t n, T alpha, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_ref(std::size_t n, const T* x, const T* y) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <typename T>
T sum_ref(std::size_t n, const T* x) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <typename T>
void scale_shift_ref(std::size_t n, T scale, T shift, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * scale + shift;
}

void gemm_scalar(const GemmArgs& g) {
    gemm_ref<float>(g.m, g.n, g.k, g.a, g.lda, g.b, g.ldb, g.c, g.ldc, g.accumulate);
}

void gemm_nt_scalar(const GemmArgs& g) {
    gemm_nt_ref<float>(g.m, g.n, g.k, g.a, g.lda, g.b, g.ldb, g.c, g.ldc, g.accumulate);
}

}  // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{
        &gemm_scalar,
        &gemm_nt_scalar,
        &axpy_ref<float>,
        &dot_ref<float>,
        &sum_ref<float>,
        &scale_shift_ref<float>,
    };
    return table;
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    gemm_ref<double>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    gemm_nt_ref<double>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void axpy(std::size_t n, double alpha, const double* x, double* y) { axpy_ref(n, alpha, x, y); }
double dot(std::size_t n, const double* x, const double* y) { return dot_ref(n, x, y); }
double sum(std::size_t n, const double* x) { return sum_ref(n, x); }
void scale_shift(std::size_t n, double scale, double shift, const double* x, double* y) {
    scale_shift_ref(n, scale, shift, x, y);
}

}  // namespace maskgan::simd
