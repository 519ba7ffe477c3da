#pragma once

// Thin wrapper over FFTW (double precision). Plans are created once per
// (size, kind) under a mutex and executed with the new-array interface, so
// callers can use any buffer.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cqtdiff::fft {

using cplx = std::complex<double>;

namespace detail {

enum class Kind { forward_c2c, backward_c2c, r2c, c2r };

class PlanCache {
public:
    static PlanCache& instance() {
        static PlanCache cache;
        return cache;
    }

    fftw_plan get(std::size_t n, Kind kind) {
        std::lock_guard lock(mutex_);
        auto key = std::make_pair(n, kind);
        if (auto it = plans_.find(key); it != plans_.end()) return it->second;

        const int len = static_cast<int>(n);
        constexpr unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
        fftw_plan plan = nullptr;
        std::vector<cplx> c(n), c2(n);
        std::vector<double> r(n);
        auto* cp = reinterpret_cast<fftw_complex*>(c.data());
        auto* cp2 = reinterpret_cast<fftw_complex*>(c2.data());
        switch (kind) {
        case Kind::forward_c2c: plan = fftw_plan_dft_1d(len, cp, cp2, FFTW_FORWARD, flags); break;
        case Kind::backward_c2c: plan = fftw_plan_dft_1d(len, cp, cp2, FFTW_BACKWARD, flags); break;
        case Kind::r2c: plan = fftw_plan_dft_r2c_1d(len, r.data(), cp, flags); break;
        case Kind::c2r: plan = fftw_plan_dft_c2r_1d(len, cp, r.data(), flags); break;
        }
        if (plan == nullptr) throw std::runtime_error("fftw: plan creation failed");
        plans_.emplace(key, plan);
        return plan;
    }

    PlanCache(const PlanCache&) = delete;
    PlanCache& operator=(const PlanCache&) = delete;

private:
    PlanCache() = default;
    ~PlanCache() {
        for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
    }

    std::mutex mutex_;
    std::map<std::pair<std::size_t, Kind>, fftw_plan> plans_;
};

}  // namespace detail

/// Unnormalized complex DFT, X[k] = sum_n x[n] e^{-2 pi i k n / N}.
inline void forward(std::span<const cplx> in, std::span<cplx> out) {
    auto plan = detail::PlanCache::instance().get(in.size(), detail::Kind::forward_c2c);
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in.data())),
                     reinterpret_cast<fftw_complex*>(out.data()));
}

/// Unnormalized inverse DFT (no 1/N factor).
inline void backward(std::span<const cplx> in, std::span<cplx> out) {
    auto plan = detail::PlanCache::instance().get(in.size(), detail::Kind::backward_c2c);
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in.data())),
                     reinterpret_cast<fftw_complex*>(out.data()));
}

/// Real-input DFT; `out` holds the N/2+1 non-negative frequency bins.
inline void real_forward(std::span<const double> in, std::span<cplx> out) {
    if (out.size() != in.size() / 2 + 1) throw std::invalid_argument("fft: r2c size mismatch");
    auto plan = detail::PlanCache::instance().get(in.size(), detail::Kind::r2c);
    fftw_execute_dft_r2c(plan, const_cast<double*>(in.data()),
                         reinterpret_cast<fftw_complex*>(out.data()));
}

/// Unnormalized inverse of real_forward. The half spectrum is copied, FFTW
/// c2r destroys its input.
inline void real_backward(std::span<const cplx> half, std::span<double> out) {
    if (half.size() != out.size() / 2 + 1) throw std::invalid_argument("fft: c2r size mismatch");
    std::vector<cplx> scratch(half.begin(), half.end());
    auto plan = detail::PlanCache::instance().get(out.size(), detail::Kind::c2r);
    fftw_execute_dft_c2r(plan, reinterpret_cast<fftw_complex*>(scratch.data()), out.data());
}

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace cqtdiff::fft
