// Compiled with -mavx2 -mfma. Only reached through the dispatch table after
// the CPU has been checked for both features.

#include "maskgan/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cstring>
#include <vector>

namespace maskgan::simd {
namespace {

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
}

// 4 rows x 16 columns register tile.
inline void tile_4x16(std::size_t k, const float* a, std::size_t lda, const float* b,
                      std::size_t ldb, float* c, std::size_t ldc) {
    __m256 c00 = _mm256_loadu_ps(c), c01 = _mm256_loadu_ps(c + 8);
    __m256 c10 = _mm256_loadu_ps(c + ldc), c11 = _mm256_loadu_ps(c + ldc + 8);
    __m256 c20 = _mm256_loadu_ps(c + 2 * ldc), c21 = _mm256_loadu_ps(c + 2 * ldc + 8);
    __m256 c30 = _mm256_loadu_ps(c + 3 * ldc), c31 = _mm256_loadu_ps(c + 3 * ldc + 8);
    const float* a0 = a;
    const float* a1 = a + lda;
    const float* a2 = a + 2 * lda;
    const float* a3 = a + 3 * lda;
    for (std::size_t p = 0; p < k; ++p) {
        const float* brow = b + p * ldb;
        const __m256 b0 = _mm256_loadu_ps(brow);
        const __m256 b1 = _mm256_loadu_ps(brow + 8);
        __m256 av = _mm256_broadcast_ss(a0 + p);
        c00 = _mm256_fmadd_ps(av, b0, c00);
        c01 = _mm256_fmadd_ps(av, b1, c01);
        av = _mm256_broadcast_ss(a1 + p);
        c10 = _mm256_fmadd_ps(av, b0, c10);
        c11 = _mm256_fmadd_ps(av, b1, c11);
        av = _mm256_broadcast_ss(a2 + p);
        c20 = _mm256_fmadd_ps(av, b0, c20);
        c21 = _mm256_fmadd_ps(av, b1, c21);
        av = _mm256_broadcast_ss(a3 + p);
        c30 = _mm256_fmadd_ps(av, b0, c30);
        c31 = _mm256_fmadd_ps(av, b1, c31);
    }
    _mm256_storeu_ps(c, c00);
    _mm256_storeu_ps(c + 8, c01);
    _mm256_storeu_ps(c + ldc, c10);
    _mm256_storeu_ps(c + ldc + 8, c11);
    _mm256_storeu_ps(c + 2 * ldc, c20);
    _mm256_storeu_ps(c + 2 * ldc + 8, c21);
    _mm256_storeu_ps(c + 3 * ldc, c30);
    _mm256_storeu_ps(c + 3 * ldc + 8, c31);
}

// 1 row x 16 columns, used for the row remainder.
inline void tile_1x16(std::size_t k, const float* a, const float* b, std::size_t ldb, float* c) {
    __m256 c0 = _mm256_loadu_ps(c), c1 = _mm256_loadu_ps(c + 8);
    for (std::size_t p = 0; p < k; ++p) {
        const float* brow = b + p * ldb;
        const __m256 av = _mm256_broadcast_ss(a + p);
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
    }
    _mm256_storeu_ps(c, c0);
    _mm256_storeu_ps(c + 8, c1);
}

// Column remainder (< 16 columns): 8-wide then scalar.
void edge_columns(std::size_t m, std::size_t j0, std::size_t n, std::size_t k, const float* a,
                  std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * lda;
        float* crow = c + i * ldc;
        std::size_t j = j0;
        for (; j + 8 <= n; j += 8) {
            __m256 acc = _mm256_loadu_ps(crow + j);
            for (std::size_t p = 0; p < k; ++p)
                acc = _mm256_fmadd_ps(_mm256_broadcast_ss(arow + p), _mm256_loadu_ps(b + p * ldb + j), acc);
            _mm256_storeu_ps(crow + j, acc);
        }
        for (; j < n; ++j) {
            float acc = crow[j];
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * ldb + j];
            crow[j] = acc;
        }
    }
}

void gemm_avx2(const GemmArgs& g) {
    if (!g.accumulate)
        for (std::size_t i = 0; i < g.m; ++i) std::memset(g.c + i * g.ldc, 0, g.n * sizeof(float));
    if (g.m == 0 || g.n == 0 || g.k == 0) return;

    // Block over k and n; each block of B is packed into contiguous 16-column strips.
    constexpr std::size_t kBlock = 256;
    constexpr std::size_t nBlock = 256;
    thread_local std::vector<float> pack;
    pack.resize(kBlock * nBlock);
    const std::size_t n16 = g.n - g.n % 16;
    for (std::size_t p0 = 0; p0 < g.k; p0 += kBlock) {
        const std::size_t kb = std::min(kBlock, g.k - p0);
        const float* bpanel = g.b + p0 * g.ldb;
        for (std::size_t j0 = 0; j0 < n16; j0 += nBlock) {
            const std::size_t jw = std::min(n16, j0 + nBlock) - j0;
            for (std::size_t s = 0; s < jw; s += 16) {
                float* dst = pack.data() + s * kb;
                for (std::size_t p = 0; p < kb; ++p) {
                    const float* src = bpanel + p * g.ldb + j0 + s;
                    _mm256_storeu_ps(dst + p * 16, _mm256_loadu_ps(src));
                    _mm256_storeu_ps(dst + p * 16 + 8, _mm256_loadu_ps(src + 8));
                }
            }
            std::size_t i = 0;
            for (; i + 4 <= g.m; i += 4)
                for (std::size_t s = 0; s < jw; s += 16)
                    tile_4x16(kb, g.a + i * g.lda + p0, g.lda, pack.data() + s * kb, 16, g.c + i * g.ldc + j0 + s, g.ldc);
            for (; i < g.m; ++i)
                for (std::size_t s = 0; s < jw; s += 16)
                    tile_1x16(kb, g.a + i * g.lda + p0, pack.data() + s * kb, 16, g.c + i * g.ldc + j0 + s);
        }
        if (n16 < g.n) edge_columns(g.m, n16, g.n, kb, g.a + p0, g.lda, bpanel, g.ldb, g.c, g.ldc);
    }
}

// Dot-product tiles: R rows of A against S rows of B, vectorized along k.
template <int R, int S>
inline void dot_tile(std::size_t k, const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                     std::size_t ldc) {
    __m256 acc[R][S];
    for (int r = 0; r < R; ++r)
        for (int s = 0; s < S; ++s) acc[r][s] = _mm256_setzero_ps();
    std::size_t p = 0;
    for (; p + 8 <= k; p += 8) {
        __m256 bv[S];
        for (int s = 0; s < S; ++s) bv[s] = _mm256_loadu_ps(b + s * ldb + p);
        for (int r = 0; r < R; ++r) {
            const __m256 av = _mm256_loadu_ps(a + r * lda + p);
            for (int s = 0; s < S; ++s) acc[r][s] = _mm256_fmadd_ps(av, bv[s], acc[r][s]);
        }
    }
    for (int r = 0; r < R; ++r)
        for (int s = 0; s < S; ++s) {
            float v = hsum(acc[r][s]);
            for (std::size_t q = p; q < k; ++q) v += a[r * lda + q] * b[s * ldb + q];
            c[r * ldc + s] += v;
        }
}

void gemm_nt_avx2(const GemmArgs& g) {
    if (!g.accumulate)
        for (std::size_t i = 0; i < g.m; ++i) std::memset(g.c + i * g.ldc, 0, g.n * sizeof(float));
    // Block over k so the rows of B stay in L1 across the row tiles of A.
    constexpr std::size_t kBlock = 512;
    for (std::size_t p0 = 0; p0 < g.k; p0 += kBlock) {
        const std::size_t kb = std::min(kBlock, g.k - p0);
        const float* bp = g.b + p0;
        std::size_t i = 0;
        for (; i + 4 <= g.m; i += 4) {
            const float* a = g.a + i * g.lda + p0;
            float* c = g.c + i * g.ldc;
            std::size_t j = 0;
            for (; j + 3 <= g.n; j += 3) dot_tile<4, 3>(kb, a, g.lda, bp + j * g.ldb, g.ldb, c + j, g.ldc);
            for (; j < g.n; ++j) dot_tile<4, 1>(kb, a, g.lda, bp + j * g.ldb, g.ldb, c + j, g.ldc);
        }
        for (; i < g.m; ++i) {
            const float* a = g.a + i * g.lda + p0;
            float* c = g.c + i * g.ldc;
            std::size_t j = 0;
            for (; j + 4 <= g.n; j += 4) dot_tile<1, 4>(kb, a, g.lda, bp + j * g.ldb, g.ldb, c + j, g.ldc);
            for (; j < g.n; ++j) dot_tile<1, 1>(kb, a, g.lda, bp + j * g.ldb, g.ldb, c + j, g.ldc);
        }
    }
}

void axpy_avx2(std::size_t n, float alpha, const float* x, float* y) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

float dot_avx2(std::size_t n, const float* x, const float* y) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    float acc = hsum(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

float sum_avx2(std::size_t n, const float* x) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
        acc1 = _mm256_add_ps(acc1, _mm256_loadu_ps(x + i + 8));
    }
    for (; i + 8 <= n; i += 8) acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
    float acc = hsum(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) acc += x[i];
    return acc;
}

void scale_shift_avx2(std::size_t n, float scale, float shift, const float* x, float* y) {
    const __m256 sv = _mm256_set1_ps(scale), bv = _mm256_set1_ps(shift);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_fmadd_ps(_mm256_loadu_ps(x + i), sv, bv));
    for (; i < n; ++i) y[i] = x[i] * scale + shift;
}

}  // namespace

const KernelTable& avx2_kernels() {
    static const KernelTable table{
        &gemm_avx2, &gemm_nt_avx2, &axpy_avx2, &dot_avx2, &sum_avx2, &scale_shift_avx2,
    };
    return table;
}

}  // namespace maskgan::simd
