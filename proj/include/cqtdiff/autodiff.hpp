#pragma once

// Minimal reverse-mode differentiation over dense tensors.
//
// A Tape records nodes eagerly in creation order; every primitive stores its
// forward value and a closure that accumulates vector-Jacobian products into
// its parents. backward() walks the tape once in reverse and consumes it.
// Nodes whose parents carry no gradient skip their closures entirely.

#include "cqtdiff/cqt.hpp"
#include "cqtdiff/tensor.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cqtdiff::grad {

enum class Op : std::uint8_t {
    leaf,
    constant,
    param,
    add,
    sub,
    mul,
    scale,
    matmul,
    linear,
    conv1d_freq,
    gelu,
    film,
    concat_channels,
    complex_pack,
    complex_unpack,
    downsample_time,
    upsample_time,
    fft_linear,
    linear_map,
    sum_squares,
    clip,
};

template <class T>
class Tape;

template <class T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return tape_->node(id_).value; }
    const Shape& shape() const { return value().shape; }
    std::size_t id() const { return id_; }
    Tape<T>* tape() const { return tape_; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class T>
struct Gradients {
    std::map<std::size_t, Tensor<T>> leaves;
    std::map<std::string, Tensor<T>> params;

    const Tensor<T>& wrt(const Var<T>& v) const {
        auto it = leaves.find(v.id());
        if (it == leaves.end()) throw UsageError("autodiff: variable is not a differentiable leaf");
        return it->second;
    }
};

template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Op op = Op::constant;
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        std::string param_name;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> v) { return push(Op::constant, std::move(v), false); }
    Var<T> leaf(Tensor<T> v) { return push(Op::leaf, std::move(v), true); }
    Var<T> param(const std::string& name, const Tensor<T>& v, bool trainable = true) {
        Var<T> out = push(Op::param, v, trainable);
        nodes_.back().param_name = name;
        return out;
    }

    /// Records a computed node. `fn` runs only if some parent requires grad.
    Var<T> record(Op op, Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
        return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(fn));
    }

    Var<T> record(Op op, Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
        bool rg = false;
        std::vector<std::size_t> ids;
        ids.reserve(parents.size());
        for (const auto& p : parents) {
            if (p.tape() != this) throw UsageError("autodiff: operands recorded on different tapes");
            ids.push_back(p.id());
            rg = rg || nodes_[p.id()].requires_grad;
        }
        Var<T> out = push(op, std::move(value), rg);
        nodes_.back().parents = std::move(ids);
        if (rg) nodes_.back().backward = std::move(fn);
        return out;
    }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Gradient buffer of a node, allocated as zeros on first use.
    Tensor<T>& grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros_like(n.value);
        return n.grad;
    }

    Gradients<T> backward(const Var<T>& out, const Tensor<T>& seed) {
        if (consumed_) throw UsageError("autodiff: graph already consumed");
        if (out.tape() != this) throw UsageError("autodiff: output is not recorded on this tape");
        check_same_shape(seed, out.value(), "backward seed");
        consumed_ = true;

        axpy(T(1), seed, grad_buffer(out.id()));
        Gradients<T> result;
        for (std::size_t i = out.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.op == Op::leaf || n.op == Op::param) {
                if (!n.requires_grad) continue;
                Tensor<T> g = n.grad.data.empty() ? Tensor<T>::zeros_like(n.value) : std::move(n.grad);
                if (n.op == Op::leaf) {
                    result.leaves.emplace(i, std::move(g));
                } else if (auto it = result.params.find(n.param_name); it != result.params.end()) {
                    axpy(T(1), g, it->second);
                } else {
                    result.params.emplace(n.param_name, std::move(g));
                }
                continue;
            }
            if (n.grad.data.empty()) continue;
            if (n.backward) n.backward(*this, i);
            n.grad = Tensor<T>();
        }
        return result;
    }

private:
    Var<T> push(Op op, Tensor<T> v, bool rg) {
        Node n;
        n.op = op;
        n.value = std::move(v);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape() != b.tape() || a.tape() == nullptr) throw UsageError("autodiff: operands recorded on different tapes");
    return *a.tape();
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
    if (s.size() != r) throw UsageError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
}

// Anti-aliasing lowpass for 2x time resampling: Kaiser-windowed sinc with
// cutoff at a quarter of the sample rate and unit DC gain.
template <class T>
const std::vector<T>& halfband_kernel() {
    static const std::vector<T> taps = [] {
        constexpr int radius = 7;
        constexpr double beta = 6.0;
        auto bessel_i0 = [](double x) {
            double sum = 1.0, term = 1.0;
            for (int k = 1; k < 50; ++k) {
                term *= (x / (2.0 * k)) * (x / (2.0 * k));
                sum += term;
            }
            return sum;
        };
        std::vector<double> h(2 * radius + 1);
        double total = 0.0;
        for (int n = -radius; n <= radius; ++n) {
            const double r = static_cast<double>(n) / radius;
            const double win = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / bessel_i0(beta);
            const double arg = 0.5 * kPi * n;
            const double sinc = n == 0 ? 1.0 : std::sin(arg) / arg;
            h[n + radius] = 0.5 * sinc * win;
            total += h[n + radius];
        }
        std::vector<T> out(h.size());
        for (std::size_t i = 0; i < h.size(); ++i) out[i] = static_cast<T>(h[i] / total);
        return out;
    }();
    return taps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    Tape<T>& t = detail::same_tape(a, b);
    check_same_shape(a.value(), b.value(), "add");
    Tensor<T> y = a.value();
    axpy(T(1), b.value(), y);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(Op::add, std::move(y), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) axpy(T(1), g, tp.grad_buffer(ia));
        if (tp.requires_grad(ib)) axpy(T(1), g, tp.grad_buffer(ib));
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    Tape<T>& t = detail::same_tape(a, b);
    check_same_shape(a.value(), b.value(), "sub");
    Tensor<T> y = a.value();
    axpy(T(-1), b.value(), y);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(Op::sub, std::move(y), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) axpy(T(1), g, tp.grad_buffer(ia));
        if (tp.requires_grad(ib)) axpy(T(-1), g, tp.grad_buffer(ib));
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    Tape<T>& t = detail::same_tape(a, b);
    check_same_shape(a.value(), b.value(), "mul");
    Tensor<T> y = Tensor<T>::zeros_like(a.value());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(Op::mul, std::move(y), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) {
            auto& ga = tp.grad_buffer(ia);
            const auto& bv = tp.value(ib);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tp.requires_grad(ib)) {
            auto& gb = tp.grad_buffer(ib);
            const auto& av = tp.value(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> y = a.value();
    for (auto& v : y.data) v *= c;
    const std::size_t ia = a.id();
    return a.tape()->record(Op::scale, std::move(y), {a}, [ia, c](Tape<T>& tp, std::size_t self) {
        axpy(c, tp.grad(self), tp.grad_buffer(ia));
    });
}

/// GELU with the exact Gaussian CDF, x * Phi(x).
template <class T>
Var<T> gelu(const Var<T>& a) {
    const auto& x = a.value();
    Tensor<T> y = Tensor<T>::zeros_like(x);
    const T inv_sqrt2 = static_cast<T>(1.0 / std::sqrt(2.0));
    detail::ConstArrMap<T> xm(x.ptr(), static_cast<Eigen::Index>(x.size()));
    detail::ArrMap<T> ym(y.ptr(), static_cast<Eigen::Index>(y.size()));
    ym = T(0.5) * xm * (T(1) + (xm * inv_sqrt2).erf());
    const std::size_t ia = a.id();
    return a.tape()->record(Op::gelu, std::move(y), {a}, [ia, inv_sqrt2](Tape<T>& tp, std::size_t self) {
        const auto& xv = tp.value(ia);
        const auto& g = tp.grad(self);
        auto& gx = tp.grad_buffer(ia);
        const auto n = static_cast<Eigen::Index>(xv.size());
        detail::ConstArrMap<T> xm(xv.ptr(), n), gm(g.ptr(), n);
        detail::ArrMap<T> gxm(gx.ptr(), n);
        const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * kPi));
        gxm += gm * (T(0.5) * (T(1) + (xm * inv_sqrt2).erf()) + xm * inv_sqrt2pi * (T(-0.5) * xm.square()).exp());
    });
}

/// Hard clip to [-c, c]; the derivative is taken as 0 at |x| == c.
template <class T>
Var<T> clip(const Var<T>& a, T c) {
    if (!(c > T(0))) throw UsageError("clip: threshold must be positive");
    Tensor<T> y = a.value();
    for (auto& v : y.data) v = std::min(std::max(v, -c), c);
    const std::size_t ia = a.id();
    return a.tape()->record(Op::clip, std::move(y), {a}, [ia, c](Tape<T>& tp, std::size_t self) {
        const auto& xv = tp.value(ia);
        const auto& g = tp.grad(self);
        auto& gx = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (std::abs(xv[i]) < c) gx[i] += g[i];
    });
}

/// Sum of squares, returned as a one-element tensor.
template <class T>
Var<T> sum_squares(const Var<T>& a) {
    const auto& x = a.value();
    T s = T(0);
    for (auto v : x.data) s += v * v;
    const std::size_t ia = a.id();
    return a.tape()->record(Op::sum_squares, Tensor<T>({1}, s), {a}, [ia](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(self)[0];
        axpy(T(2) * g, tp.value(ia), tp.grad_buffer(ia));
    });
}

// ---------------------------------------------------------------------------
// Dense algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tape<T>& t = detail::same_tape(a, b);
    detail::require_rank(a.shape(), 2, "matmul");
    detail::require_rank(b.shape(), 2, "matmul");
    const auto m = static_cast<Eigen::Index>(a.shape()[0]), k = static_cast<Eigen::Index>(a.shape()[1]);
    const auto n = static_cast<Eigen::Index>(b.shape()[1]);
    if (static_cast<Eigen::Index>(b.shape()[0]) != k) throw UsageError("matmul: inner dimensions differ");
    Tensor<T> y({a.shape()[0], b.shape()[1]});
    using M = detail::RowMat<T>;
    Eigen::Map<M>(y.ptr(), m, n).noalias() =
        Eigen::Map<const M>(a.value().ptr(), m, k) * Eigen::Map<const M>(b.value().ptr(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(Op::matmul, std::move(y), {a, b}, [ia, ib, m, k, n](Tape<T>& tp, std::size_t self) {
        Eigen::Map<const M> g(tp.grad(self).ptr(), m, n);
        if (tp.requires_grad(ia))
            Eigen::Map<M>(tp.grad_buffer(ia).ptr(), m, k).noalias() += g * Eigen::Map<const M>(tp.value(ib).ptr(), k, n).transpose();
        if (tp.requires_grad(ib))
            Eigen::Map<M>(tp.grad_buffer(ib).ptr(), k, n).noalias() += Eigen::Map<const M>(tp.value(ia).ptr(), m, k).transpose() * g;
    });
}

/// y = W x + b for a vector x.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    Tape<T>& t = detail::same_tape(x, w);
    detail::same_tape(x, b);
    detail::require_rank(x.shape(), 1, "linear");
    detail::require_rank(w.shape(), 2, "linear");
    const auto out = static_cast<Eigen::Index>(w.shape()[0]), in = static_cast<Eigen::Index>(w.shape()[1]);
    if (static_cast<Eigen::Index>(x.shape()[0]) != in || b.shape() != Shape{w.shape()[0]})
        throw UsageError("linear: shape mismatch");
    using M = detail::RowMat<T>;
    using V = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    Tensor<T> y = b.value();
    Eigen::Map<V>(y.ptr(), out).noalias() += Eigen::Map<const M>(w.value().ptr(), out, in) * Eigen::Map<const V>(x.value().ptr(), in);
    const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
    return t.record(Op::linear, std::move(y), {x, w, b}, [ix, iw, ib, out, in](Tape<T>& tp, std::size_t self) {
        Eigen::Map<const V> g(tp.grad(self).ptr(), out);
        if (tp.requires_grad(ix))
            Eigen::Map<V>(tp.grad_buffer(ix).ptr(), in).noalias() += Eigen::Map<const M>(tp.value(iw).ptr(), out, in).transpose() * g;
        if (tp.requires_grad(iw))
            Eigen::Map<M>(tp.grad_buffer(iw).ptr(), out, in).noalias() += g * Eigen::Map<const V>(tp.value(ix).ptr(), in).transpose();
        if (tp.requires_grad(ib)) Eigen::Map<V>(tp.grad_buffer(ib).ptr(), out) += g;
    });
}

// ---------------------------------------------------------------------------
// Spectrogram-shaped operations, layout [C, F, T]

/// Convolution along the frequency axis with an odd kernel [Cout, Cin, K],
/// zero padding, no bias. Each tap is one GEMM over all (freq, time) positions
/// that stay inside the frequency range.
template <class T>
Var<T> conv1d_freq(const Var<T>& x, const Var<T>& w, int dilation = 1) {
    Tape<T>& t = detail::same_tape(x, w);
    detail::require_rank(x.shape(), 3, "conv1d_freq");
    detail::require_rank(w.shape(), 3, "conv1d_freq");
    if (dilation < 1) throw UsageError("conv1d_freq: dilation must be >= 1");
    const std::size_t cin = x.shape()[0], F = x.shape()[1], T_ = x.shape()[2];
    const std::size_t cout = w.shape()[0], K = w.shape()[2];
    if (w.shape()[1] != cin) throw UsageError("conv1d_freq: input channels do not match kernel");
    if (K % 2 == 0) throw UsageError("conv1d_freq: kernel size must be odd");

    Tensor<T> y({cout, F, T_});
    const auto FT = static_cast<Eigen::Index>(F * T_);
    auto tap_range = [F, K, dilation](std::size_t k, std::ptrdiff_t& off, std::size_t& f0, std::size_t& fv) {
        off = (static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(K / 2)) * dilation;
        const auto a = static_cast<std::size_t>(std::abs(off));
        if (a >= F) return false;
        fv = F - a;
        f0 = off < 0 ? a : 0;
        return true;
    };
    auto wmap = [cin, cout, K](const T* base, std::size_t k) {
        return detail::ConstStridedMap<T>(base + k, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin),
                                          Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(cin * K), static_cast<Eigen::Index>(K)));
    };
    for (std::size_t k = 0; k < K; ++k) {
        std::ptrdiff_t off;
        std::size_t f0, fv;
        if (!tap_range(k, off, f0, fv)) continue;
        const auto cols = static_cast<Eigen::Index>(fv * T_);
        detail::ConstMatMap<T> in(x.value().ptr() + (f0 + off) * T_, static_cast<Eigen::Index>(cin), cols, Eigen::OuterStride<>(FT));
        detail::MatMap<T> out(y.ptr() + f0 * T_, static_cast<Eigen::Index>(cout), cols, Eigen::OuterStride<>(FT));
        out.noalias() += wmap(w.value().ptr(), k) * in;
    }

    const std::size_t ix = x.id(), iw = w.id();
    return t.record(Op::conv1d_freq, std::move(y), {x, w},
                    [ix, iw, cin, cout, K, T_, FT, tap_range, wmap](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const bool gx_needed = tp.requires_grad(ix), gw_needed = tp.requires_grad(iw);
        T* gx = gx_needed ? tp.grad_buffer(ix).ptr() : nullptr;
        T* gw = gw_needed ? tp.grad_buffer(iw).ptr() : nullptr;
        for (std::size_t k = 0; k < K; ++k) {
            std::ptrdiff_t off;
            std::size_t f0, fv;
            if (!tap_range(k, off, f0, fv)) continue;
            const auto cols = static_cast<Eigen::Index>(fv * T_);
            detail::ConstMatMap<T> go(g.ptr() + f0 * T_, static_cast<Eigen::Index>(cout), cols, Eigen::OuterStride<>(FT));
            if (gx_needed) {
                detail::MatMap<T> gi(gx + (f0 + off) * T_, static_cast<Eigen::Index>(cin), cols, Eigen::OuterStride<>(FT));
                gi.noalias() += wmap(tp.value(iw).ptr(), k).transpose() * go;
            }
            if (gw_needed) {
                detail::ConstMatMap<T> in(tp.value(ix).ptr() + (f0 + off) * T_, static_cast<Eigen::Index>(cin), cols, Eigen::OuterStride<>(FT));
                detail::StridedMap<T> gwk(gw + k, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin),
                                          Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(cin * K), static_cast<Eigen::Index>(K)));
                gwk.noalias() += go * in.transpose();
            }
        }
    });
}

/// Feature-wise modulation: y[c] = x[c] * (1 + delta[c]) + shift[c].
template <class T>
Var<T> film(const Var<T>& x, const Var<T>& delta, const Var<T>& shift) {
    Tape<T>& t = detail::same_tape(x, delta);
    detail::same_tape(x, shift);
    detail::require_rank(x.shape(), 3, "film");
    const std::size_t C = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
    if (delta.shape() != Shape{C} || shift.shape() != Shape{C}) throw UsageError("film: modulation must have one value per channel");
    Tensor<T> y = Tensor<T>::zeros_like(x.value());
    for (std::size_t c = 0; c < C; ++c) {
        const T s = T(1) + delta.value()[c], b = shift.value()[c];
        const T* xp = x.value().ptr() + c * plane;
        T* yp = y.ptr() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) yp[i] = xp[i] * s + b;
    }
    const std::size_t ix = x.id(), id = delta.id(), is = shift.id();
    return t.record(Op::film, std::move(y), {x, delta, shift}, [ix, id, is, C, plane](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& xv = tp.value(ix);
        for (std::size_t c = 0; c < C; ++c) {
            const T* gp = g.ptr() + c * plane;
            if (tp.requires_grad(ix)) {
                const T s = T(1) + tp.value(id)[c];
                T* gx = tp.grad_buffer(ix).ptr() + c * plane;
                for (std::size_t i = 0; i < plane; ++i) gx[i] += gp[i] * s;
            }
            if (tp.requires_grad(id)) {
                const T* xp = xv.ptr() + c * plane;
                T acc = T(0);
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
                tp.grad_buffer(id)[c] += acc;
            }
            if (tp.requires_grad(is)) {
                T acc = T(0);
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                tp.grad_buffer(is)[c] += acc;
            }
        }
    });
}

/// Concatenation along the channel axis of [C_i, F, T] tensors.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw UsageError("concat_channels: no inputs");
    Tape<T>& t = *parts.front().tape();
    Shape s = parts.front().shape();
    detail::require_rank(s, 3, "concat_channels");
    std::size_t C = 0;
    for (const auto& p : parts) {
        detail::require_rank(p.shape(), 3, "concat_channels");
        if (p.shape()[1] != s[1] || p.shape()[2] != s[2]) throw UsageError("concat_channels: spatial shapes differ");
        C += p.shape()[0];
    }
    Tensor<T> y({C, s[1], s[2]});
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(off));
        ids.push_back(p.id());
        offsets.push_back(off);
        off += p.value().size();
    }
    return t.record(Op::concat_channels, std::move(y), parts, [ids, offsets](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            if (!tp.requires_grad(ids[j])) continue;
            auto& gp = tp.grad_buffer(ids[j]);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[j] + i];
        }
    });
}

/// [F, M, 2] interleaved complex -> [2, F, M] real/imaginary channels.
template <class T>
Var<T> complex_unpack(const Var<T>& a) {
    detail::require_rank(a.shape(), 3, "complex_unpack");
    if (a.shape()[2] != 2) throw UsageError("complex_unpack: last axis must be 2");
    const std::size_t n = a.shape()[0] * a.shape()[1];
    Tensor<T> y({2, a.shape()[0], a.shape()[1]});
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = a.value()[2 * i];
        y[n + i] = a.value()[2 * i + 1];
    }
    const std::size_t ia = a.id();
    return a.tape()->record(Op::complex_unpack, std::move(y), {a}, [ia, n](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) {
            ga[2 * i] += g[i];
            ga[2 * i + 1] += g[n + i];
        }
    });
}

/// [2, F, M] real/imaginary channels -> [F, M, 2] interleaved complex.
template <class T>
Var<T> complex_pack(const Var<T>& a) {
    detail::require_rank(a.shape(), 3, "complex_pack");
    if (a.shape()[0] != 2) throw UsageError("complex_pack: expected two channels");
    const std::size_t n = a.shape()[1] * a.shape()[2];
    Tensor<T> y({a.shape()[1], a.shape()[2], 2});
    for (std::size_t i = 0; i < n; ++i) {
        y[2 * i] = a.value()[i];
        y[2 * i + 1] = a.value()[n + i];
    }
    const std::size_t ia = a.id();
    return a.tape()->record(Op::complex_pack, std::move(y), {a}, [ia, n](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) {
            ga[i] += g[2 * i];
            ga[n + i] += g[2 * i + 1];
        }
    });
}

namespace detail {

// Valid output range [lo, hi) for y[t] = x[2t + off] with 0 <= 2t + off < n.
inline std::pair<std::size_t, std::size_t> stride2_range(std::ptrdiff_t off, std::size_t n, std::size_t tmax) {
    const std::ptrdiff_t lo = off < 0 ? (-off + 1) / 2 : 0;
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(tmax),
                                                       (static_cast<std::ptrdiff_t>(n) - 1 - off) / 2 + 1);
    if (hi <= lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// y[t] += sum_j h[j] x[2t + j - R]; taps that are exactly zero are skipped.
template <class T>
void decimate_row(const T* x, std::size_t n_in, T* y, std::size_t n_out, const std::vector<T>& h) {
    const auto R = static_cast<std::ptrdiff_t>(h.size() / 2);
    for (std::ptrdiff_t j = -R; j <= R; ++j) {
        const T c = h[static_cast<std::size_t>(j + R)];
        if (c == T(0)) continue;
        auto [lo, hi] = stride2_range(j, n_in, n_out);
        for (std::size_t t = lo; t < hi; ++t) y[t] += c * x[2 * t + j];
    }
}

// Transpose of decimate_row: x[2t + j - R] += h[j] y[t].
template <class T>
void decimate_row_adjoint(const T* y, std::size_t n_out, T* x, std::size_t n_in, const std::vector<T>& h) {
    const auto R = static_cast<std::ptrdiff_t>(h.size() / 2);
    for (std::ptrdiff_t j = -R; j <= R; ++j) {
        const T c = h[static_cast<std::size_t>(j + R)];
        if (c == T(0)) continue;
        auto [lo, hi] = stride2_range(j, n_in, n_out);
        for (std::size_t t = lo; t < hi; ++t) x[2 * t + j] += c * y[t];
    }
}

}  // namespace detail

/// Anti-aliased 2x decimation along time: lowpass, then keep even samples.
template <class T>
Var<T> downsample_time(const Var<T>& a, int factor = 2) {
    detail::require_rank(a.shape(), 3, "downsample_time");
    if (factor != 2) throw UsageError("downsample_time: only factor 2 is supported");
    const std::size_t rows = a.shape()[0] * a.shape()[1], Tin = a.shape()[2];
    if (Tin % 2 != 0) throw UsageError("downsample_time: time axis must be even");
    const std::size_t Tout = Tin / 2;
    const auto& h = detail::halfband_kernel<T>();
    Tensor<T> y({a.shape()[0], a.shape()[1], Tout});
    for (std::size_t r = 0; r < rows; ++r) detail::decimate_row(a.value().ptr() + r * Tin, Tin, y.ptr() + r * Tout, Tout, h);
    const std::size_t ia = a.id();
    return a.tape()->record(Op::downsample_time, std::move(y), {a}, [ia, rows, Tin, Tout](Tape<T>& tp, std::size_t self) {
        const auto& hh = detail::halfband_kernel<T>();
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) detail::decimate_row_adjoint(g.ptr() + r * Tout, Tout, ga.ptr() + r * Tin, Tin, hh);
    });
}

/// 2x interpolation along time: zero insertion followed by the same lowpass
/// with gain 2, i.e. twice the transpose of the decimator.
template <class T>
Var<T> upsample_time(const Var<T>& a, int factor = 2) {
    detail::require_rank(a.shape(), 3, "upsample_time");
    if (factor != 2) throw UsageError("upsample_time: only factor 2 is supported");
    const std::size_t rows = a.shape()[0] * a.shape()[1], Tin = a.shape()[2], Tout = 2 * Tin;
    const auto& h = detail::halfband_kernel<T>();
    std::vector<T> h2(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) h2[i] = T(2) * h[i];
    Tensor<T> y({a.shape()[0], a.shape()[1], Tout});
    for (std::size_t r = 0; r < rows; ++r) detail::decimate_row_adjoint(a.value().ptr() + r * Tin, Tin, y.ptr() + r * Tout, Tout, h2);
    const std::size_t ia = a.id();
    return a.tape()->record(Op::upsample_time, std::move(y), {a}, [ia, rows, Tin, Tout, h2](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) detail::decimate_row(g.ptr() + r * Tout, Tout, ga.ptr() + r * Tin, Tin, h2);
    });
}

// ---------------------------------------------------------------------------
// Linear operators given as (forward, adjoint) pairs

template <class T>
using LinearFn = std::function<Tensor<T>(const Tensor<T>&)>;

/// Applies a fixed linear operator; its VJP is the supplied adjoint.
template <class T>
Var<T> linear_map(const Var<T>& a, const LinearFn<T>& apply, const LinearFn<T>& adjoint, Op tag = Op::linear_map) {
    Tensor<T> y = apply(a.value());
    const std::size_t ia = a.id();
    return a.tape()->record(tag, std::move(y), {a}, [ia, adjoint](Tape<T>& tp, std::size_t self) {
        Tensor<T> g = adjoint(tp.grad(self));
        axpy(T(1), g, tp.grad_buffer(ia));
    });
}

namespace detail {

template <class T>
Tensor<T> spectrogram_to_tensor(const CqtSpectrogram& s) {
    Tensor<T> out({s.bands, s.frames, 2});
    for (std::size_t i = 0; i < s.coeffs.size(); ++i) {
        out[2 * i] = static_cast<T>(s.coeffs[i].real());
        out[2 * i + 1] = static_cast<T>(s.coeffs[i].imag());
    }
    return out;
}

template <class T>
CqtSpectrogram tensor_to_spectrogram(const CqtPlan& plan, const Tensor<T>& t) {
    if (t.shape != Shape{plan.band_count(), plan.frames, 2}) throw UsageError("cqt: tensor shape does not match plan");
    CqtSpectrogram s = CqtSpectrogram::zeros_like(plan);
    for (std::size_t i = 0; i < s.coeffs.size(); ++i)
        s.coeffs[i] = cplx(static_cast<double>(t[2 * i]), static_cast<double>(t[2 * i + 1]));
    return s;
}

template <class T>
Tensor<T> signal_to_tensor(const std::vector<double>& x) {
    Tensor<T> out({x.size()});
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(x[i]);
    return out;
}

}  // namespace detail

/// Forward CQT of a [L] signal, producing an interleaved [F, M, 2] tensor.
/// The VJP is adjoint_forward. Transform math runs in double.
template <class T>
Var<T> cqt_forward(const Var<T>& x, const CqtPlan& plan) {
    detail::require_rank(x.shape(), 1, "cqt_forward");
    const CqtPlan* p = &plan;
    return linear_map<T>(
        x,
        [p](const Tensor<T>& v) { return detail::spectrogram_to_tensor<T>(forward(*p, std::span<const T>(v.data))); },
        [p](const Tensor<T>& g) { return detail::signal_to_tensor<T>(adjoint_forward(*p, detail::tensor_to_spectrogram(*p, g))); },
        Op::fft_linear);
}

/// Inverse CQT of an [F, M, 2] tensor, producing a [L] signal. The VJP is
/// adjoint_inverse.
template <class T>
Var<T> cqt_inverse(const Var<T>& s, const CqtPlan& plan) {
    const CqtPlan* p = &plan;
    return linear_map<T>(
        s,
        [p](const Tensor<T>& v) { return detail::signal_to_tensor<T>(inverse(*p, detail::tensor_to_spectrogram(*p, v))); },
        [p](const Tensor<T>& g) { return detail::spectrogram_to_tensor<T>(adjoint_inverse(*p, std::span<const T>(g.data))); },
        Op::fft_linear);
}

}  // namespace cqtdiff::grad
