#pragma once

// Named parameter arrays, Adam, and the binary parameter container.
//
// Container layout (all integers and reals little-endian):
//   "CQDPARAM"  u32 version  u64 adam_step  u64 entry_count
//   per entry:  u32 name_len, name bytes, u8 trainable, u32 rank, u64 dims[rank],
//               f64 values[n], and for trainable entries f64 m[n], f64 v[n]

#include "cqtdiff/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>

namespace cqtdiff::grad {

template <class T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        bool trainable = true;
        Tensor<T> m;
        Tensor<T> v;
    };

    void add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (entries_.count(name)) throw UsageError("params: duplicate parameter name '" + name + "'");
        Entry e;
        e.m = Tensor<T>::zeros_like(value);
        e.v = Tensor<T>::zeros_like(value);
        e.value = std::move(value);
        e.trainable = trainable;
        entries_.emplace(name, std::move(e));
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor<T>& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("params: unknown parameter '" + name + "'");
        return it->second.value;
    }

    Tensor<T>& get_mutable(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("params: unknown parameter '" + name + "'");
        return it->second.value;
    }

    /// Records the parameter on a tape; frozen entries carry no gradient.
    Var<T> var(Tape<T>& tape, const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("params: unknown parameter '" + name + "'");
        return tape.param(name, it->second.value, it->second.trainable);
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    std::size_t parameter_count(bool trainable_only = true) const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_)
            if (e.trainable || !trainable_only) n += e.value.size();
        return n;
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, e] : entries_) {
            out.add(name, e.value.template cast<U>(), e.trainable);
            auto& oe = out.entries().at(name);
            oe.m = e.m.template cast<U>();
            oe.v = e.v.template cast<U>();
        }
        out.set_step(step_);
        return out;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        if (a.step_ != b.step_ || a.entries_.size() != b.entries_.size()) return false;
        for (const auto& [name, e] : a.entries_) {
            auto it = b.entries_.find(name);
            if (it == b.entries_.end()) return false;
            const auto& o = it->second;
            if (e.trainable != o.trainable || e.value.shape != o.value.shape || e.value.data != o.value.data ||
                e.m.data != o.m.data || e.v.data != o.v.data)
                return false;
        }
        return true;
    }

private:
    std::map<std::string, Entry> entries_;
    std::uint64_t step_ = 0;
};

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update over every trainable parameter.
template <class T>
void adam_step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, const AdamConfig& cfg = {}) {
    for (const auto& [name, e] : params.entries()) {
        if (!e.trainable) continue;
        auto it = grads.find(name);
        if (it == grads.end()) throw UsageError("adam: missing gradient for parameter '" + name + "'");
        check_same_shape(it->second, e.value, "adam");
    }
    const std::uint64_t step = params.step() + 1;
    params.set_step(step);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& [name, e] : params.entries()) {
        if (!e.trainable) continue;
        const auto& g = grads.at(name);
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double m = cfg.beta1 * static_cast<double>(e.m[i]) + (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * static_cast<double>(e.v[i]) + (1.0 - cfg.beta2) * gi * gi;
            e.m[i] = static_cast<T>(m);
            e.v[i] = static_cast<T>(v);
            const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
            e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) - update);
        }
    }
}

namespace io {

inline constexpr char kParamMagic[8] = {'C', 'Q', 'D', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kParamVersion = 1;

template <class U>
void write_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw UsageError("params: truncated stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 24) {
    const auto n = read_le<std::uint32_t>(is);
    if (n > max_len) throw UsageError("params: implausible string length");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw UsageError("params: truncated stream");
    return s;
}

}  // namespace io

template <class T>
void write_params(std::ostream& os, const ParamStore<T>& params) {
    os.write(io::kParamMagic, sizeof io::kParamMagic);
    io::write_le<std::uint32_t>(os, io::kParamVersion);
    io::write_le<std::uint64_t>(os, params.step());
    io::write_le<std::uint64_t>(os, params.entries().size());
    for (const auto& [name, e] : params.entries()) {
        io::write_string(os, name);
        io::write_le<std::uint8_t>(os, e.trainable ? 1 : 0);
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
        for (auto d : e.value.shape) io::write_le<std::uint64_t>(os, d);
        for (auto v : e.value.data) io::write_le<double>(os, static_cast<double>(v));
        if (e.trainable) {
            for (auto v : e.m.data) io::write_le<double>(os, static_cast<double>(v));
            for (auto v : e.v.data) io::write_le<double>(os, static_cast<double>(v));
        }
    }
    if (!os) throw std::runtime_error("params: write failed");
}

template <class T>
ParamStore<T> read_params(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, io::kParamMagic))
        throw UsageError("params: not a parameter container");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != io::kParamVersion) throw UsageError("params: unsupported container version " + std::to_string(version));
    ParamStore<T> out;
    out.set_step(io::read_le<std::uint64_t>(is));
    const auto count = io::read_le<std::uint64_t>(is);
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::string name = io::read_string(is);
        const bool trainable = io::read_le<std::uint8_t>(is) != 0;
        const auto rank = io::read_le<std::uint32_t>(is);
        if (rank > 8) throw UsageError("params: implausible tensor rank");
        Shape shape(rank);
        for (auto& d : shape) d = io::read_le<std::uint64_t>(is);
        Tensor<T> value(shape);
        for (auto& v : value.data) v = static_cast<T>(io::read_le<double>(is));
        out.add(name, std::move(value), trainable);
        if (trainable) {
            auto& e = out.entries().at(name);
            for (auto& v : e.m.data) v = static_cast<T>(io::read_le<double>(is));
            for (auto& v : e.v.data) v = static_cast<T>(io::read_le<double>(is));
        }
    }
    return out;
}

}  // namespace cqtdiff::grad
