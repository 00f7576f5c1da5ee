#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef MASKGAN_REAL
#define MASKGAN_REAL float
#endif

namespace maskgan {

/// Scalar type of every tensor. float in the production build; the gradient
/// checking build recompiles the library with double.
using Real = MASKGAN_REAL;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// NCHW extents. Vectors are (N, D, 1, 1).
struct Shape {
    int n = 1, c = 1, h = 1, w = 1;

    std::size_t size() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t sample() const { return static_cast<std::size_t>(c) * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense NCHW buffer with value semantics.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = Real(0));
    Tensor(Shape shape, std::vector<Real> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    std::span<Real> span() { return data_; }
    std::span<const Real> span() const { return data_; }
    std::vector<Real>& storage() { return data_; }
    const std::vector<Real>& storage() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    Real& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    Real at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    Real* sample_ptr(int n) { return data_.data() + static_cast<std::size_t>(n) * shape_.sample(); }
    const Real* sample_ptr(int n) const {
        return data_.data() + static_cast<std::size_t>(n) * shape_.sample();
    }
    Real* plane_ptr(int n, int c) {
        return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane();
    }
    const Real* plane_ptr(int n, int c) const {
        return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane();
    }

    void fill(Real v);
    /// Same data, new extents with the same element count.
    Tensor reshaped(Shape shape) const;
    /// Samples [begin, begin+count) along N.
    Tensor slice_batch(int begin, int count) const;

    bool operator==(const Tensor&) const = default;

private:
    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    Shape shape_{0, 0, 0, 0};
    std::vector<Real> data_;
};

/// Stacks single-sample tensors (N = 1 each, equal C/H/W) along N.
Tensor stack_batch(std::span<const Tensor> samples);

void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace maskgan
