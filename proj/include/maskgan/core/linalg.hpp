#pragma once

#include <cstddef>
#include <vector>

#include "maskgan/core/tensor.hpp"

namespace maskgan::linalg {

enum class Trans { No, Yes };

/// C[m x n] (+)= op(A) * op(B) where op(A) is m x k and op(B) is k x n.
/// A and B are dense row-major in their stored orientation.
void matmul(std::size_t m, std::size_t n, std::size_t k, const Real* a, Trans ta, const Real* b,
            Trans tb, Real* c, bool accumulate);

void axpy(std::size_t n, Real alpha, const Real* x, Real* y);
Real dot(std::size_t n, const Real* x, const Real* y);
Real sum(std::size_t n, const Real* x);

/// Convolution patch extraction for one sample. col has shape
/// (channels*k*k) x (out_h*out_w), written at column offset col_offset with
/// row stride col_ld.
struct ConvGeometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
};
void im2col(const Real* image, const ConvGeometry& g, Real* col, std::size_t col_ld,
            std::size_t col_offset);
/// Adjoint of im2col: scatters-adds columns back into the image.
void col2im(const Real* col, const ConvGeometry& g, std::size_t col_ld, std::size_t col_offset,
            Real* image);

}  // namespace maskgan::linalg
