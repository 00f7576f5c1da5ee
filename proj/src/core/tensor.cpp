#include "maskgan/core/tensor.hpp"

#include <algorithm>
#include <cstring>

namespace maskgan {

std::string Shape::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, Real fill) : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
        throw ShapeError("negative tensor extent " + shape.str());
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape.size())
        throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                         shape.str());
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape.size() != size())
        throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
}

Tensor Tensor::slice_batch(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n)
        throw ShapeError("batch slice out of range for " + shape_.str());
    Shape s = shape_;
    s.n = count;
    std::vector<Real> out(sample_ptr(begin), sample_ptr(begin) + s.size());
    return Tensor(s, std::move(out));
}

Tensor stack_batch(std::span<const Tensor> samples) {
    if (samples.empty()) throw ShapeError("cannot stack an empty batch");
    Shape s = samples.front().shape();
    if (s.n != 1) throw ShapeError("stack_batch expects single-sample tensors");
    s.n = static_cast<int>(samples.size());
    Tensor out(s);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Shape& si = samples[i].shape();
        if (si.n != 1 || si.c != s.c || si.h != s.h || si.w != s.w)
            throw ShapeError("stack_batch shape mismatch: " + si.str());
        std::memcpy(out.sample_ptr(static_cast<int>(i)), samples[i].data(), s.sample() * sizeof(Real));
    }
    return out;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b)) throw ShapeError(std::string(what) + ": shape " + a.str() + " vs " + b.str());
}

}  // namespace maskgan
