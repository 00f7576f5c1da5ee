#include "maskgan/core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "maskgan/core/linalg.hpp"
#include "maskgan/simd/kernels.hpp"

namespace maskgan {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
    if (grad.empty() && value.size() > 0) grad = Tensor(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
}

Real Var::item() const {
    if (value().size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
    return value()[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw ShapeError("backward() root must be a scalar");

    // Iterative post-order DFS gives a topological order of the recorded graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
    // Interior gradients are only needed during the sweep.
    for (Node* node : order)
        if (node->backward) node->grad = Tensor();
}

Var detach(const Var& x) { return Var::leaf(x.value(), false); }

namespace ops {
namespace {

using NodePtr = std::shared_ptr<Node>;

bool any_requires(std::initializer_list<const Var*> vars) {
    if (!g_grad_enabled) return false;
    for (const Var* v : vars)
        if (*v && v->requires_grad()) return true;
    return false;
}

// Wraps a computed value; records the closure only when some input needs it.
Var record(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (any_requires(inputs)) {
        node->requires_grad = true;
        for (const Var* v : inputs)
            if (*v) node->inputs.push_back(v->handle());
        node->backward = std::move(bw);
    }
    return Var(std::move(node));
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

template <typename F>
Var unary(const Var& a, F&& fwd, std::function<void(const Tensor& x, const Tensor& y, const Tensor& gy, Tensor& gx)> bw) {
    Tensor out(a.shape());
    const Real* x = a.value().data();
    Real* y = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) y[i] = fwd(x[i]);
    NodePtr an = a.handle();
    return record(std::move(out), {&a}, [an, bw](Node& self) {
        if (wants(an)) bw(an->value, self.value, self.grad, an->ensure_grad());
    });
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    NodePtr an = a.handle(), bn = b.handle();
    return record(std::move(out), {&a, &b}, [an, bn](Node& self) {
        const std::size_t n = self.grad.size();
        if (wants(an)) linalg::axpy(n, Real(1), self.grad.data(), an->ensure_grad().data());
        if (wants(bn)) linalg::axpy(n, Real(1), self.grad.data(), bn->ensure_grad().data());
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    NodePtr an = a.handle(), bn = b.handle();
    return record(std::move(out), {&a, &b}, [an, bn](Node& self) {
        const std::size_t n = self.grad.size();
        if (wants(an)) linalg::axpy(n, Real(1), self.grad.data(), an->ensure_grad().data());
        if (wants(bn)) linalg::axpy(n, Real(-1), self.grad.data(), bn->ensure_grad().data());
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    NodePtr an = a.handle(), bn = b.handle();
    return record(std::move(out), {&a, &b}, [an, bn](Node& self) {
        const std::size_t n = self.grad.size();
        const Real* g = self.grad.data();
        if (wants(an)) {
            Real* ga = an->ensure_grad().data();
            const Real* bv = bn->value.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (wants(bn)) {
            Real* gb = bn->ensure_grad().data();
            const Real* av = an->value.data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(const Var& a, Real s) {
    return unary(
        a, [s](Real x) { return x * s; },
        [s](const Tensor&, const Tensor&, const Tensor& gy, Tensor& gx) {
            linalg::axpy(gy.size(), s, gy.data(), gx.data());
        });
}

Var add_scalar(const Var& a, Real s) {
    return unary(
        a, [s](Real x) { return x + s; },
        [](const Tensor&, const Tensor&, const Tensor& gy, Tensor& gx) {
            linalg::axpy(gy.size(), Real(1), gy.data(), gx.data());
        });
}

Var exp(const Var& a) {
    return unary(
        a, [](Real x) { return std::exp(x); },
        [](const Tensor&, const Tensor& y, const Tensor& gy, Tensor& gx) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i];
        });
}

Var relu(const Var& a) {
    return unary(
        a, [](Real x) { return x > 0 ? x : Real(0); },
        [](const Tensor& x, const Tensor&, const Tensor& gy, Tensor& gx) {
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (x[i] > 0) gx[i] += gy[i];
        });
}

Var leaky_relu(const Var& a, Real slope) {
    return unary(
        a, [slope](Real x) { return x > 0 ? x : x * slope; },
        [slope](const Tensor& x, const Tensor&, const Tensor& gy, Tensor& gx) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += x[i] > 0 ? gy[i] : gy[i] * slope;
        });
}

Var tanh(const Var& a) {
    return unary(
        a, [](Real x) { return std::tanh(x); },
        [](const Tensor&, const Tensor& y, const Tensor& gy, Tensor& gx) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (Real(1) - y[i] * y[i]);
        });
}

Var sigmoid(const Var& a) {
    return unary(
        a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
        [](const Tensor&, const Tensor& y, const Tensor& gy, Tensor& gx) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (Real(1) - y[i]);
        });
}

namespace {

// Samples per im2col chunk so the column buffer stays near 16 MB.
int chunk_samples(std::size_t col_rows, std::size_t plane, int batch) {
    constexpr std::size_t kMaxColElems = std::size_t(1) << 22;
    const std::size_t per = std::max<std::size_t>(1, col_rows * plane);
    return static_cast<int>(std::clamp<std::size_t>(kMaxColElems / per, 1, static_cast<std::size_t>(batch)));
}

// (C x nb*P) <- NCHW samples [n0, n0+nb)
void gather_chunk(const Tensor& t, int n0, int nb, Real* out) {
    const int c = t.shape().c;
    const std::size_t p = t.shape().plane();
    const std::size_t ld = p * nb;
    for (int s = 0; s < nb; ++s)
        for (int ch = 0; ch < c; ++ch)
            std::memcpy(out + ch * ld + s * p, t.plane_ptr(n0 + s, ch), p * sizeof(Real));
}

void scatter_chunk_add(const Real* in, int n0, int nb, Tensor& t) {
    const int c = t.shape().c;
    const std::size_t p = t.shape().plane();
    const std::size_t ld = p * nb;
    for (int s = 0; s < nb; ++s)
        for (int ch = 0; ch < c; ++ch) linalg::axpy(p, Real(1), in + ch * ld + s * p, t.plane_ptr(n0 + s, ch));
}

void add_bias(Tensor& out, const Tensor& bias) {
    for (int n = 0; n < out.shape().n; ++n)
        for (int c = 0; c < out.shape().c; ++c) {
            Real* p = out.plane_ptr(n, c);
            const Real b = bias[c];
            for (std::size_t i = 0; i < out.shape().plane(); ++i) p[i] += b;
        }
}

void bias_grad(const Tensor& gy, Tensor& gb) {
    for (int n = 0; n < gy.shape().n; ++n)
        for (int c = 0; c < gy.shape().c; ++c) gb[c] += linalg::sum(gy.shape().plane(), gy.plane_ptr(n, c));
}

// dW (rows x cols) += transpose of tmp (cols x rows)
void add_transposed(const std::vector<Real>& tmp, std::size_t rows, std::size_t cols, Real* dw) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dw[r * cols + c] += tmp[c * rows + r];
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const Shape xs = x.shape(), ws = weight.shape();
    if (ws.c != xs.c || ws.h != ws.w)
        throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
    if (bias && bias.shape().size() != static_cast<std::size_t>(ws.n))
        throw ShapeError("conv2d: bias size mismatch");
    const int k = ws.h;
    const int oh = (xs.h + 2 * pad - k) / stride + 1;
    const int ow = (xs.w + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
    const linalg::ConvGeometry g{xs.c, xs.h, xs.w, k, stride, pad, oh, ow};
    const std::size_t krows = static_cast<std::size_t>(xs.c) * k * k;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    const int cout = ws.n;

    Tensor out(Shape{xs.n, cout, oh, ow});
    const int chunk = chunk_samples(krows, plane, xs.n);
    std::vector<Real> col, res;
    for (int n0 = 0; n0 < xs.n; n0 += chunk) {
        const int nb = std::min(chunk, xs.n - n0);
        const std::size_t cols = plane * nb;
        col.resize(krows * cols);
        res.resize(static_cast<std::size_t>(cout) * cols);
        for (int s = 0; s < nb; ++s) linalg::im2col(x.value().sample_ptr(n0 + s), g, col.data(), cols, s * plane);
        linalg::matmul(cout, cols, krows, weight.value().data(), linalg::Trans::No, col.data(),
                       linalg::Trans::No, res.data(), false);
        scatter_chunk_add(res.data(), n0, nb, out);
    }
    if (bias) add_bias(out, bias.value());

    NodePtr xn = x.handle(), wn = weight.handle(), bn = bias.handle();
    return record(std::move(out), {&x, &weight, &bias}, [xn, wn, bn, g, krows, plane, cout, chunk](Node& self) {
        const Tensor& gy = self.grad;
        const int batch = gy.shape().n;
        if (wants(bn)) bias_grad(gy, bn->ensure_grad());
        if (!wants(xn) && !wants(wn)) return;
        std::vector<Real> col, gyc, tmp;
        for (int n0 = 0; n0 < batch; n0 += chunk) {
            const int nb = std::min(chunk, batch - n0);
            const std::size_t cols = plane * nb;
            gyc.resize(static_cast<std::size_t>(cout) * cols);
            gather_chunk(gy, n0, nb, gyc.data());
            col.resize(krows * cols);
            if (wants(wn)) {
                for (int s = 0; s < nb; ++s) linalg::im2col(xn->value.sample_ptr(n0 + s), g, col.data(), cols, s * plane);
                tmp.resize(krows * cout);
                // dW^T (krows x cout) = col (krows x cols) * gy^T (cols x cout)
                linalg::matmul(krows, cout, cols, col.data(), linalg::Trans::No, gyc.data(), linalg::Trans::Yes,
                               tmp.data(), false);
                add_transposed(tmp, cout, krows, wn->ensure_grad().data());
            }
            if (wants(xn)) {
                // dcol (krows x cols) = W^T (krows x cout) * gy (cout x cols)
                linalg::matmul(krows, cols, cout, wn->value.data(), linalg::Trans::Yes, gyc.data(),
                               linalg::Trans::No, col.data(), false);
                Tensor& gx = xn->ensure_grad();
                for (int s = 0; s < nb; ++s) linalg::col2im(col.data(), g, cols, s * plane, gx.sample_ptr(n0 + s));
            }
        }
    });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int output_pad) {
    const Shape xs = x.shape(), ws = weight.shape();
    if (ws.n != xs.c || ws.h != ws.w)
        throw ShapeError("conv_transpose2d: input " + xs.str() + " incompatible with weight " + ws.str());
    if (output_pad >= stride) throw ArgumentError("conv_transpose2d: output_pad must be < stride");
    const int k = ws.h;
    const int cout = ws.c;
    const int oh = (xs.h - 1) * stride - 2 * pad + k + output_pad;
    const int ow = (xs.w - 1) * stride - 2 * pad + k + output_pad;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
    // Geometry of the equivalent forward conv that maps the output back onto the input grid.
    const linalg::ConvGeometry g{cout, oh, ow, k, stride, pad, xs.h, xs.w};
    const std::size_t krows = static_cast<std::size_t>(cout) * k * k;
    const std::size_t plane = xs.plane();
    const int cin = xs.c;

    Tensor out(Shape{xs.n, cout, oh, ow});
    const int chunk = chunk_samples(krows, plane, xs.n);
    std::vector<Real> col, xc;
    for (int n0 = 0; n0 < xs.n; n0 += chunk) {
        const int nb = std::min(chunk, xs.n - n0);
        const std::size_t cols = plane * nb;
        xc.resize(static_cast<std::size_t>(cin) * cols);
        gather_chunk(x.value(), n0, nb, xc.data());
        col.resize(krows * cols);
        linalg::matmul(krows, cols, cin, weight.value().data(), linalg::Trans::Yes, xc.data(), linalg::Trans::No,
                       col.data(), false);
        for (int s = 0; s < nb; ++s) linalg::col2im(col.data(), g, cols, s * plane, out.sample_ptr(n0 + s));
    }
    if (bias) add_bias(out, bias.value());

    NodePtr xn = x.handle(), wn = weight.handle(), bn = bias.handle();
    return record(std::move(out), {&x, &weight, &bias}, [xn, wn, bn, g, krows, plane, cin, chunk](Node& self) {
        const Tensor& gy = self.grad;
        const int batch = gy.shape().n;
        if (wants(bn)) bias_grad(gy, bn->ensure_grad());
        if (!wants(xn) && !wants(wn)) return;
        std::vector<Real> col, xc, res, tmp;
        for (int n0 = 0; n0 < batch; n0 += chunk) {
            const int nb = std::min(chunk, batch - n0);
            const std::size_t cols = plane * nb;
            col.resize(krows * cols);
            for (int s = 0; s < nb; ++s) linalg::im2col(gy.sample_ptr(n0 + s), g, col.data(), cols, s * plane);
            if (wants(xn)) {
                res.resize(static_cast<std::size_t>(cin) * cols);
                linalg::matmul(cin, cols, krows, wn->value.data(), linalg::Trans::No, col.data(), linalg::Trans::No,
                               res.data(), false);
                scatter_chunk_add(res.data(), n0, nb, xn->ensure_grad());
            }
            if (wants(wn)) {
                xc.resize(static_cast<std::size_t>(cin) * cols);
                gather_chunk(xn->value, n0, nb, xc.data());
                tmp.resize(krows * cin);
                // dW^T (krows x cin) = dcol (krows x cols) * x^T (cols x cin)
                linalg::matmul(krows, cin, cols, col.data(), linalg::Trans::No, xc.data(), linalg::Trans::Yes,
                               tmp.data(), false);
                add_transposed(tmp, cin, krows, wn->ensure_grad().data());
            }
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const Shape xs = x.shape(), ws = weight.shape();
    const std::size_t din = xs.sample();
    if (ws.sample() != din) throw ShapeError("linear: input " + xs.str() + " vs weight " + ws.str());
    const int dout = ws.n;
    Tensor out(Shape{xs.n, dout, 1, 1});
    linalg::matmul(xs.n, dout, din, x.value().data(), linalg::Trans::No, weight.value().data(), linalg::Trans::Yes,
                   out.data(), false);
    if (bias) {
        if (bias.value().size() != static_cast<std::size_t>(dout)) throw ShapeError("linear: bias size mismatch");
        for (int n = 0; n < xs.n; ++n) linalg::axpy(dout, Real(1), bias.value().data(), out.sample_ptr(n));
    }
    NodePtr xn = x.handle(), wn = weight.handle(), bn = bias.handle();
    return record(std::move(out), {&x, &weight, &bias}, [xn, wn, bn, din, dout](Node& self) {
        const Tensor& gy = self.grad;
        const int batch = gy.shape().n;
        if (wants(bn))
            for (int n = 0; n < batch; ++n) linalg::axpy(dout, Real(1), gy.sample_ptr(n), bn->ensure_grad().data());
        if (wants(xn))
            linalg::matmul(batch, din, dout, gy.data(), linalg::Trans::No, wn->value.data(), linalg::Trans::No,
                           xn->ensure_grad().data(), true);
        if (wants(wn))
            linalg::matmul(dout, din, batch, gy.data(), linalg::Trans::Yes, xn->value.data(), linalg::Trans::No,
                           wn->ensure_grad().data(), true);
    });
}

Var instance_norm(const Var& x, Real eps) {
    const Shape s = x.shape();
    const std::size_t p = s.plane();
    Tensor out(s);
    std::vector<Real> inv(static_cast<std::size_t>(s.n) * s.c);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const Real* in = x.value().plane_ptr(n, c);
            Real* o = out.plane_ptr(n, c);
            const Real mean = linalg::sum(p, in) / static_cast<Real>(p);
            Real var = 0;
            for (std::size_t i = 0; i < p; ++i) {
                const Real d = in[i] - mean;
                var += d * d;
            }
            var /= static_cast<Real>(p);
            const Real iv = Real(1) / std::sqrt(var + eps);
            inv[static_cast<std::size_t>(n) * s.c + c] = iv;
            for (std::size_t i = 0; i < p; ++i) o[i] = (in[i] - mean) * iv;
        }
    NodePtr xn = x.handle();
    return record(std::move(out), {&x}, [xn, inv = std::move(inv)](Node& self) {
        if (!wants(xn)) return;
        const Shape s = self.value.shape();
        const std::size_t p = s.plane();
        Tensor& gx = xn->ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const Real* y = self.value.plane_ptr(n, c);
                const Real* gy = self.grad.plane_ptr(n, c);
                Real* g = gx.plane_ptr(n, c);
                const Real mg = linalg::sum(p, gy) / static_cast<Real>(p);
                const Real mgy = linalg::dot(p, gy, y) / static_cast<Real>(p);
                const Real iv = inv[static_cast<std::size_t>(n) * s.c + c];
                for (std::size_t i = 0; i < p; ++i) g[i] += iv * (gy[i] - mg - y[i] * mgy);
            }
    });
}

Var channel_affine(const Var& x, const Var& scale_v, const Var& shift_v) {
    const Shape s = x.shape();
    const Shape expect{s.n, s.c, 1, 1};
    require_same_shape(scale_v.shape(), expect, "channel_affine scale");
    require_same_shape(shift_v.shape(), expect, "channel_affine shift");
    const std::size_t p = s.plane();
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t j = static_cast<std::size_t>(n) * s.c + c;
            simd::scale_shift(p, scale_v.value()[j], shift_v.value()[j], x.value().plane_ptr(n, c),
                              out.plane_ptr(n, c));
        }
    NodePtr xn = x.handle(), sn = scale_v.handle(), tn = shift_v.handle();
    return record(std::move(out), {&x, &scale_v, &shift_v}, [xn, sn, tn](Node& self) {
        const Shape s = self.value.shape();
        const std::size_t p = s.plane();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const std::size_t j = static_cast<std::size_t>(n) * s.c + c;
                const Real* gy = self.grad.plane_ptr(n, c);
                if (wants(xn)) linalg::axpy(p, sn->value[j], gy, xn->ensure_grad().plane_ptr(n, c));
                if (wants(sn)) sn->ensure_grad()[j] += linalg::dot(p, gy, xn->value.plane_ptr(n, c));
                if (wants(tn)) tn->ensure_grad()[j] += linalg::sum(p, gy);
            }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, Real momentum, Real eps) {
    const Shape s = x.shape();
    const std::size_t p = s.plane();
    const std::size_t count = p * s.n;
    if (gamma.value().size() != static_cast<std::size_t>(s.c) || beta.value().size() != static_cast<std::size_t>(s.c))
        throw ShapeError("batch_norm: affine size mismatch for " + s.str());
    std::vector<Real> mean(s.c), inv(s.c);
    if (training) {
        for (int c = 0; c < s.c; ++c) {
            Real m = 0;
            for (int n = 0; n < s.n; ++n) m += linalg::sum(p, x.value().plane_ptr(n, c));
            m /= static_cast<Real>(count);
            Real v = 0;
            for (int n = 0; n < s.n; ++n) {
                const Real* in = x.value().plane_ptr(n, c);
                for (std::size_t i = 0; i < p; ++i) v += (in[i] - m) * (in[i] - m);
            }
            v /= static_cast<Real>(count);
            mean[c] = m;
            inv[c] = Real(1) / std::sqrt(v + eps);
            const Real unbiased = count > 1 ? v * static_cast<Real>(count) / static_cast<Real>(count - 1) : v;
            running_mean[c] = (1 - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < s.c; ++c) {
            mean[c] = running_mean[c];
            inv[c] = Real(1) / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor normed(s), out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const Real* in = x.value().plane_ptr(n, c);
            Real* y = normed.plane_ptr(n, c);
            Real* o = out.plane_ptr(n, c);
            const Real gm = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < p; ++i) {
                y[i] = (in[i] - mean[c]) * inv[c];
                o[i] = y[i] * gm + bt;
            }
        }
    NodePtr xn = x.handle(), gn = gamma.handle(), bn = beta.handle();
    return record(std::move(out), {&x, &gamma, &beta},
                  [xn, gn, bn, normed = std::move(normed), inv = std::move(inv), training, count](Node& self) {
                      const Shape s = self.value.shape();
                      const std::size_t p = s.plane();
                      for (int c = 0; c < s.c; ++c) {
                          Real sg = 0, sgy = 0;
                          for (int n = 0; n < s.n; ++n) {
                              sg += linalg::sum(p, self.grad.plane_ptr(n, c));
                              sgy += linalg::dot(p, self.grad.plane_ptr(n, c), normed.plane_ptr(n, c));
                          }
                          if (wants(gn)) gn->ensure_grad()[c] += sgy;
                          if (wants(bn)) bn->ensure_grad()[c] += sg;
                          if (!wants(xn)) continue;
                          const Real gm = gn->value[c];
                          Tensor& gx = xn->ensure_grad();
                          const Real mg = gm * sg / static_cast<Real>(count);
                          const Real mgy = gm * sgy / static_cast<Real>(count);
                          for (int n = 0; n < s.n; ++n) {
                              const Real* gy = self.grad.plane_ptr(n, c);
                              const Real* y = normed.plane_ptr(n, c);
                              Real* g = gx.plane_ptr(n, c);
                              if (training)
                                  for (std::size_t i = 0; i < p; ++i) g[i] += inv[c] * (gm * gy[i] - mg - y[i] * mgy);
                              else
                                  for (std::size_t i = 0; i < p; ++i) g[i] += inv[c] * gm * gy[i];
                          }
                      }
                  });
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    Shape s = parts.front().shape();
    int total = 0;
    for (const Var& v : parts) {
        const Shape& vs = v.shape();
        if (vs.n != s.n || vs.h != s.h || vs.w != s.w) throw ShapeError("concat_channels: mismatch " + vs.str());
        total += vs.c;
    }
    s.c = total;
    Tensor out(s);
    for (int n = 0; n < s.n; ++n) {
        int offset = 0;
        for (const Var& v : parts) {
            std::memcpy(out.plane_ptr(n, offset), v.value().sample_ptr(n), v.shape().sample() * sizeof(Real));
            offset += v.shape().c;
        }
    }
    auto node = std::make_shared<Node>();
    node->value = std::move(out);
    bool need = false;
    if (g_grad_enabled)
        for (const Var& v : parts) need = need || v.requires_grad();
    if (need) {
        node->requires_grad = true;
        std::vector<NodePtr> handles;
        for (const Var& v : parts) {
            node->inputs.push_back(v.handle());
            handles.push_back(v.handle());
        }
        node->backward = [handles](Node& self) {
            const Shape s = self.value.shape();
            for (int n = 0; n < s.n; ++n) {
                int offset = 0;
                for (const NodePtr& h : handles) {
                    const std::size_t len = h->value.shape().sample();
                    if (wants(h)) linalg::axpy(len, Real(1), self.grad.plane_ptr(n, offset), h->ensure_grad().sample_ptr(n));
                    offset += h->value.shape().c;
                }
            }
        };
    }
    return Var(std::move(node));
}

Var slice_channels(const Var& x, int begin, int count) {
    const Shape xs = x.shape();
    if (begin < 0 || count <= 0 || begin + count > xs.c) throw ShapeError("slice_channels out of range");
    Shape s = xs;
    s.c = count;
    Tensor out(s);
    const std::size_t len = static_cast<std::size_t>(count) * xs.plane();
    for (int n = 0; n < xs.n; ++n) std::memcpy(out.sample_ptr(n), x.value().plane_ptr(n, begin), len * sizeof(Real));
    NodePtr xn = x.handle();
    return record(std::move(out), {&x}, [xn, begin, len](Node& self) {
        if (!wants(xn)) return;
        for (int n = 0; n < self.value.shape().n; ++n)
            linalg::axpy(len, Real(1), self.grad.sample_ptr(n), xn->ensure_grad().plane_ptr(n, begin));
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(shape);
    NodePtr xn = x.handle();
    return record(std::move(out), {&x}, [xn](Node& self) {
        if (wants(xn)) linalg::axpy(self.grad.size(), Real(1), self.grad.data(), xn->ensure_grad().data());
    });
}

Var gather_batch(const Var& x, std::span<const int> indices) {
    Shape s = x.shape();
    for (int i : indices)
        if (i < 0 || i >= s.n) throw ShapeError("gather_batch: index out of range");
    s.n = static_cast<int>(indices.size());
    Tensor out(s);
    const std::size_t len = s.sample();
    for (std::size_t j = 0; j < indices.size(); ++j)
        std::memcpy(out.sample_ptr(static_cast<int>(j)), x.value().sample_ptr(indices[j]), len * sizeof(Real));
    NodePtr xn = x.handle();
    std::vector<int> idx(indices.begin(), indices.end());
    return record(std::move(out), {&x}, [xn, idx = std::move(idx), len](Node& self) {
        if (!wants(xn)) return;
        for (std::size_t j = 0; j < idx.size(); ++j)
            linalg::axpy(len, Real(1), self.grad.sample_ptr(static_cast<int>(j)), xn->ensure_grad().sample_ptr(idx[j]));
    });
}

Var avg_pool2(const Var& x) {
    const Shape xs = x.shape();
    const Shape s{xs.n, xs.c, xs.h / 2, xs.w / 2};
    if (s.h == 0 || s.w == 0) throw ShapeError("avg_pool2: input too small " + xs.str());
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const Real* in = x.value().plane_ptr(n, c);
            Real* o = out.plane_ptr(n, c);
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j) {
                    const Real* r0 = in + static_cast<std::size_t>(2 * i) * xs.w + 2 * j;
                    const Real* r1 = r0 + xs.w;
                    o[i * s.w + j] = Real(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
                }
        }
    NodePtr xn = x.handle();
    return record(std::move(out), {&x}, [xn](Node& self) {
        if (!wants(xn)) return;
        const Shape s = self.value.shape();
        const int iw = xn->value.shape().w;
        Tensor& gx = xn->ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const Real* gy = self.grad.plane_ptr(n, c);
                Real* g = gx.plane_ptr(n, c);
                for (int i = 0; i < s.h; ++i)
                    for (int j = 0; j < s.w; ++j) {
                        const Real v = Real(0.25) * gy[i * s.w + j];
                        Real* r0 = g + static_cast<std::size_t>(2 * i) * iw + 2 * j;
                        r0[0] += v;
                        r0[1] += v;
                        r0[iw] += v;
                        r0[iw + 1] += v;
                    }
            }
    });
}

Var global_avg_pool(const Var& x) {
    const Shape xs = x.shape();
    const std::size_t p = xs.plane();
    Tensor out(Shape{xs.n, xs.c, 1, 1});
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            out[static_cast<std::size_t>(n) * xs.c + c] = linalg::sum(p, x.value().plane_ptr(n, c)) / static_cast<Real>(p);
    NodePtr xn = x.handle();
    return record(std::move(out), {&x}, [xn, p](Node& self) {
        if (!wants(xn)) return;
        const Shape s = self.value.shape();
        Tensor& gx = xn->ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const Real v = self.grad[static_cast<std::size_t>(n) * s.c + c] / static_cast<Real>(p);
                Real* g = gx.plane_ptr(n, c);
                for (std::size_t i = 0; i < p; ++i) g[i] += v;
            }
    });
}

Var alpha_blend(const Var& alpha, const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "alpha_blend");
    const Shape s = a.shape();
    require_same_shape(alpha.shape(), Shape{s.n, 1, s.h, s.w}, "alpha_blend alpha");
    const std::size_t p = s.plane();
    Tensor out(s);
    for (int n = 0; n < s.n; ++n) {
        const Real* al = alpha.value().plane_ptr(n, 0);
        for (int c = 0; c < s.c; ++c) {
            const Real* av = a.value().plane_ptr(n, c);
            const Real* bv = b.value().plane_ptr(n, c);
            Real* o = out.plane_ptr(n, c);
            for (std::size_t i = 0; i < p; ++i) o[i] = al[i] * av[i] + (Real(1) - al[i]) * bv[i];
        }
    }
    NodePtr ln = alpha.handle(), an = a.handle(), bn = b.handle();
    return record(std::move(out), {&alpha, &a, &b}, [ln, an, bn](Node& self) {
        const Shape s = self.value.shape();
        const std::size_t p = s.plane();
        for (int n = 0; n < s.n; ++n) {
            const Real* al = ln->value.plane_ptr(n, 0);
            for (int c = 0; c < s.c; ++c) {
                const Real* gy = self.grad.plane_ptr(n, c);
                const Real* av = an->value.plane_ptr(n, c);
                const Real* bv = bn->value.plane_ptr(n, c);
                if (wants(ln)) {
                    Real* g = ln->ensure_grad().plane_ptr(n, 0);
                    for (std::size_t i = 0; i < p; ++i) g[i] += gy[i] * (av[i] - bv[i]);
                }
                if (wants(an)) {
                    Real* g = an->ensure_grad().plane_ptr(n, c);
                    for (std::size_t i = 0; i < p; ++i) g[i] += gy[i] * al[i];
                }
                if (wants(bn)) {
                    Real* g = bn->ensure_grad().plane_ptr(n, c);
                    for (std::size_t i = 0; i < p; ++i) g[i] += gy[i] * (Real(1) - al[i]);
                }
            }
        }
    });
}

namespace {
Tensor scalar(Real v) { return Tensor(Shape{1, 1, 1, 1}, v); }
}

Var sum(const Var& a) {
    NodePtr an = a.handle();
    return record(scalar(linalg::sum(a.value().size(), a.value().data())), {&a}, [an](Node& self) {
        if (!wants(an)) return;
        const Real g = self.grad[0];
        for (Real& v : an->ensure_grad().storage()) v += g;
    });
}

Var mean(const Var& a) {
    const Real n = static_cast<Real>(a.value().size());
    NodePtr an = a.handle();
    return record(scalar(linalg::sum(a.value().size(), a.value().data()) / n), {&a}, [an, n](Node& self) {
        if (!wants(an)) return;
        const Real g = self.grad[0] / n;
        for (Real& v : an->ensure_grad().storage()) v += g;
    });
}

Var mean_abs_diff(const Var& a, const Var& b) {
    require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
    const std::size_t n = a.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
    NodePtr an = a.handle(), bn = b.handle();
    return record(scalar(static_cast<Real>(acc / static_cast<double>(n))), {&a, &b}, [an, bn, n](Node& self) {
        const Real g = self.grad[0] / static_cast<Real>(n);
        const Real* av = an->value.data();
        const Real* bv = bn->value.data();
        Real* ga = wants(an) ? an->ensure_grad().data() : nullptr;
        Real* gb = wants(bn) ? bn->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
            const Real d = av[i] - bv[i];
            const Real sg = d > 0 ? g : (d < 0 ? -g : Real(0));
            if (ga) ga[i] += sg;
            if (gb) gb[i] -= sg;
        }
    });
}

Var mean_sq_to(const Var& a, Real target) {
    const std::size_t n = a.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += (a.value()[i] - target) * (a.value()[i] - target);
    NodePtr an = a.handle();
    return record(scalar(static_cast<Real>(acc / static_cast<double>(n))), {&a}, [an, n, target](Node& self) {
        if (!wants(an)) return;
        const Real g = Real(2) * self.grad[0] / static_cast<Real>(n);
        Real* ga = an->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * (an->value[i] - target);
    });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
    const Shape s = logits.shape();
    const std::size_t p = s.plane();
    if (labels.size() != static_cast<std::size_t>(s.n) * p)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + s.str());
    Tensor prob(s);
    double loss = 0;
    for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < p; ++i) {
            const int label = labels[static_cast<std::size_t>(n) * p + i];
            if (label < 0 || label >= s.c)
                throw ArgumentError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                    std::to_string(s.c) + ")");
            Real mx = logits.value().plane_ptr(n, 0)[i];
            for (int c = 1; c < s.c; ++c) mx = std::max(mx, logits.value().plane_ptr(n, c)[i]);
            Real z = 0;
            for (int c = 0; c < s.c; ++c) {
                const Real e = std::exp(logits.value().plane_ptr(n, c)[i] - mx);
                prob.plane_ptr(n, c)[i] = e;
                z += e;
            }
            for (int c = 0; c < s.c; ++c) prob.plane_ptr(n, c)[i] /= z;
            loss += -(logits.value().plane_ptr(n, label)[i] - mx - std::log(z));
        }
    const Real count = static_cast<Real>(static_cast<std::size_t>(s.n) * p);
    NodePtr ln = logits.handle();
    std::vector<int> lab(labels.begin(), labels.end());
    return record(scalar(static_cast<Real>(loss / count)), {&logits}, [ln, prob = std::move(prob), lab = std::move(lab), count](Node& self) {
        if (!wants(ln)) return;
        const Shape s = prob.shape();
        const std::size_t p = s.plane();
        const Real g = self.grad[0] / count;
        Tensor& gx = ln->ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const Real* pr = prob.plane_ptr(n, c);
                Real* gp = gx.plane_ptr(n, c);
                const int* lb = lab.data() + static_cast<std::size_t>(n) * p;
                for (std::size_t i = 0; i < p; ++i) gp[i] += g * (pr[i] - (lb[i] == c ? Real(1) : Real(0)));
            }
    });
}

Var bce_with_logits_to(const Var& logits, Real target) {
    const std::size_t n = logits.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real x = logits.value()[i];
        // max(x,0) - x*t + log(1 + exp(-|x|))
        acc += std::max(x, Real(0)) - x * target + std::log1p(std::exp(-std::abs(x)));
    }
    NodePtr ln = logits.handle();
    return record(scalar(static_cast<Real>(acc / static_cast<double>(n))), {&logits}, [ln, n, target](Node& self) {
        if (!wants(ln)) return;
        const Real g = self.grad[0] / static_cast<Real>(n);
        Real* gx = ln->ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) {
            const Real sgm = Real(1) / (Real(1) + std::exp(-ln->value[i]));
            gx[i] += g * (sgm - target);
        }
    });
}

}  // namespace ops
}  // namespace maskgan
