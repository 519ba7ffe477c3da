#pragma once

#include "cqtdiff/autodiff.hpp"
#include "cqtdiff/rng.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace testing_support {

inline std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    cqtdiff::CounterRng r(seed, 0x7e57);
    std::vector<double> v(n);
    for (auto& x : v) x = scale * r.normal();
    return v;
}

inline cqtdiff::grad::Tensor<double> randt(cqtdiff::grad::Shape s, std::uint64_t seed, double scale = 1.0) {
    const auto n = cqtdiff::grad::numel(s);
    return cqtdiff::grad::Tensor<double>(std::move(s), randn(n, seed, scale));
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

inline double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

inline double snr_db(const std::vector<double>& ref, const std::vector<double>& est) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        num += ref[i] * ref[i];
        den += (ref[i] - est[i]) * (ref[i] - est[i]);
    }
    return 10.0 * std::log10(num / den);
}

}  // namespace testing_support
