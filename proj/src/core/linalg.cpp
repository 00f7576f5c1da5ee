#include "maskgan/core/linalg.hpp"

#include <algorithm>
#include <cstring>
#include <utility>

#include "maskgan/simd/kernels.hpp"

namespace maskgan::linalg {
namespace {

// Transposes a rows x cols row-major matrix into out (cols x rows).
void transpose(const Real* in, std::size_t rows, std::size_t cols, Real* out) {
    constexpr std::size_t kTile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kTile)
        for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
            const std::size_t r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
        }
}

// Below this depth the transposed copy plus the tiled kernel wins.
constexpr std::size_t kDotMinK = 64;

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
             bool accumulate) {
    simd::gemm(m, n, k, a, k, b, n, c, n, accumulate);
}

}  // namespace

void matmul(std::size_t m, std::size_t n, std::size_t k, const Real* a, Trans ta, const Real* b,
            Trans tb, Real* c, bool accumulate) {
    if (ta == Trans::No && tb == Trans::Yes && k >= kDotMinK) {
        simd::gemm_nt(m, n, k, a, k, b, k, c, n, accumulate);
        return;
    }
    thread_local std::vector<Real> scratch_a, scratch_b;
    const Real* aa = a;
    const Real* bb = b;
    if (ta == Trans::Yes) {
        scratch_a.resize(m * k);
        transpose(a, k, m, scratch_a.data());
        aa = scratch_a.data();
    }
    if (tb == Trans::Yes) {
        scratch_b.resize(k * n);
        transpose(b, n, k, scratch_b.data());
        bb = scratch_b.data();
    }
    gemm_nn(m, n, k, aa, bb, c, accumulate);
}

void axpy(std::size_t n, Real alpha, const Real* x, Real* y) { simd::axpy(n, alpha, x, y); }
Real dot(std::size_t n, const Real* x, const Real* y) { return simd::dot(n, x, y); }
Real sum(std::size_t n, const Real* x) { return simd::sum(n, x); }

namespace {

// Output columns [lo, hi) whose input column ow * stride + off lies inside the image.
std::pair<int, int> valid_columns(const ConvGeometry& g, int off) {
    const int lo = off >= 0 ? 0 : std::min(g.out_w, (-off + g.stride - 1) / g.stride);
    const int last = g.width - 1 - off;
    const int hi = last < 0 ? lo : std::clamp(last / g.stride + 1, lo, g.out_w);
    return {lo, hi};
}

}  // namespace

void im2col(const Real* image, const ConvGeometry& g, Real* col, std::size_t col_ld,
            std::size_t col_offset) {
    const int k = g.kernel;
    for (int c = 0; c < g.channels; ++c) {
        const Real* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                Real* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * col_ld + col_offset;
                const int off = kj - g.pad;
                const auto [lo, hi] = valid_columns(g, off);
                for (int oh = 0; oh < g.out_h; ++oh) {
                    const int ih = oh * g.stride - g.pad + ki;
                    Real* dst = row + static_cast<std::size_t>(oh) * g.out_w;
                    if (ih < 0 || ih >= g.height) {
                        std::memset(dst, 0, sizeof(Real) * g.out_w);
                        continue;
                    }
                    const Real* src = plane + static_cast<std::size_t>(ih) * g.width;
                    std::fill(dst, dst + lo, Real(0));
                    if (g.stride == 1) {
                        if (hi > lo) std::memcpy(dst + lo, src + lo + off, sizeof(Real) * (hi - lo));
                    } else {
                        for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + off];
                    }
                    std::fill(dst + hi, dst + g.out_w, Real(0));
                }
            }
    }
}

void col2im(const Real* col, const ConvGeometry& g, std::size_t col_ld, std::size_t col_offset,
            Real* image) {
    const int k = g.kernel;
    for (int c = 0; c < g.channels; ++c) {
        Real* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const Real* row =
                    col + (static_cast<std::size_t>(c * k + ki) * k + kj) * col_ld + col_offset;
                const int off = kj - g.pad;
                const auto [lo, hi] = valid_columns(g, off);
                for (int oh = 0; oh < g.out_h; ++oh) {
                    const int ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.height) continue;
                    const Real* src = row + static_cast<std::size_t>(oh) * g.out_w;
                    Real* dst = plane + static_cast<std::size_t>(ih) * g.width;
                    for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + off] += src[ow];
                }
            }
    }
}

}  // namespace maskgan::linalg
