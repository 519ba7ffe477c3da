#pragma once

#include "cqtdiff/common.hpp"

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace cqtdiff::grad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Storage starts on a 64-byte boundary. Eigen's SIMD kernels pick their loop
// peeling from the pointer alignment, so unaligned heap blocks would make
// results depend on allocation history.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Activations use the [channels, freq, time] layout.
template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
        if (data.size() != numel(shape)) throw UsageError("tensor: value count does not match shape");
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape)
        throw UsageError(std::string(op) + ": shape mismatch " + to_string(a.shape) + " vs " + to_string(b.shape));
}

template <class T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
    check_same_shape(x, y, "axpy");
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::size_t i = 0, n = x.size(); i < n; ++i) yp[i] += alpha * xp[i];
}

}  // namespace cqtdiff::grad
