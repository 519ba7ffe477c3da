#pragma once

// Degradation operators y = A(x) and their vector-Jacobian products.
//
// Lowpass: linear-phase Kaiser FIR, zero-padded and shifted by the group
// delay, so the operator is a fixed symmetric matrix on the segment.
// Mask: zeroes the samples [round(t_start fs), round(t_end fs)).
// Clip: hard saturation at +-c, derivative 0 on |x| >= c.

#include "cqtdiff/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cqtdiff {

struct Lowpass {
    double cutoff_hz = 1000.0;
    int order = 500;
    double kaiser_beta = 8.0;
};

struct Mask {
    double t_start = 0.0;
    double t_end = 0.0;
};

struct Clip {
    double threshold = 1.0;
};

/// Clipping whose threshold is chosen to hit a target SDR on the clean signal.
struct ClipBySdr {
    double target_sdr_db = 1.0;
};

using DegradationSpec = std::variant<Lowpass, Mask, Clip, ClipBySdr>;

inline std::string degradation_name(const DegradationSpec& d) {
    static const char* names[] = {"lowpass", "mask", "clip", "clip_sdr"};
    return names[d.index()];
}

inline double bessel_i0(double x) {
    double sum = 1.0, term = 1.0;
    for (int k = 1; k < 200; ++k) {
        term *= (x / (2.0 * k)) * (x / (2.0 * k));
        sum += term;
        if (term < 1e-17 * sum) break;
    }
    return sum;
}

/// Windowed-sinc lowpass taps h[0..order], normalized to unit DC gain.
inline std::vector<double> kaiser_lowpass_kernel(double cutoff_hz, double fs, int order = 500, double beta = 8.0) {
    if (!(cutoff_hz > 0.0) || !(cutoff_hz < fs / 2.0)) throw UsageError("lowpass: cutoff must lie in (0, fs/2)");
    if (order < 2 || order % 2 != 0) throw UsageError("lowpass: order must be even and >= 2");
    if (!(beta >= 0.0)) throw UsageError("lowpass: Kaiser beta must be nonnegative");
    const double fc = cutoff_hz / fs;
    const double half = order / 2.0;
    const double i0b = bessel_i0(beta);
    std::vector<double> h(static_cast<std::size_t>(order) + 1);
    double sum = 0.0;
    for (int n = 0; n <= order; ++n) {
        const double m = n - half;
        const double sinc = m == 0.0 ? 2.0 * fc : std::sin(2.0 * kPi * fc * m) / (kPi * m);
        const double r = m / half;
        const double w = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
        h[static_cast<std::size_t>(n)] = sinc * w;
        sum += h[static_cast<std::size_t>(n)];
    }
    for (auto& v : h) v /= sum;
    return h;
}

/// y[n] = sum_k h[k] x[n + order/2 - k] with zeros outside the segment.
/// The kernel is symmetric, so this map is its own adjoint.
inline std::vector<double> fir_centered(std::span<const double> x, std::span<const double> h) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    const auto half = static_cast<std::ptrdiff_t>(h.size() / 2);
    std::vector<double> y(x.size(), 0.0);
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        // x index j = i + half - k, valid for 0 <= j < n.
        const std::ptrdiff_t k_lo = std::max<std::ptrdiff_t>(0, i + half - (n - 1));
        const std::ptrdiff_t k_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h.size()) - 1, i + half);
        double acc = 0.0;
        for (std::ptrdiff_t k = k_lo; k <= k_hi; ++k) acc += h[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(i + half - k)];
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

inline std::vector<double> lpf_kaiser(std::span<const double> x, double fs, double cutoff_hz, int order = 500, double beta = 8.0) {
    return fir_centered(x, kaiser_lowpass_kernel(cutoff_hz, fs, order, beta));
}

/// Half-open sample range covered by a gap.
inline std::pair<std::size_t, std::size_t> mask_range(const Mask& m, std::size_t n, double fs) {
    const double duration = static_cast<double>(n) / fs;
    if (!(m.t_start >= 0.0) || !(m.t_start < m.t_end) || m.t_end > duration + 1e-12)
        throw UsageError("mask: gap bounds must satisfy 0 <= t_start < t_end <= duration");
    const auto a = static_cast<std::size_t>(std::llround(m.t_start * fs));
    const auto b = std::min(n, static_cast<std::size_t>(std::llround(m.t_end * fs)));
    return {a, b};
}

inline std::vector<double> apply_mask(std::span<const double> x, const Mask& m, double fs) {
    auto [a, b] = mask_range(m, x.size(), fs);
    std::vector<double> y(x.begin(), x.end());
    std::fill(y.begin() + static_cast<std::ptrdiff_t>(a), y.begin() + static_cast<std::ptrdiff_t>(b), 0.0);
    return y;
}

inline std::vector<double> clip(std::span<const double> x, double c) {
    if (!(c > 0.0)) throw UsageError("clip: threshold must be positive");
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(std::max(x[i], -c), c);
    return y;
}

inline double sdr_db(std::span<const double> ref, std::span<const double> est) {
    if (ref.size() != est.size()) throw UsageError("sdr: length mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        num += ref[i] * ref[i];
        den += (ref[i] - est[i]) * (ref[i] - est[i]);
    }
    if (num == 0.0) throw UsageError("sdr: reference is silent");
    if (den == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(num / den);
}

/// Clipping level c with SDR(x, clip(x, c)) == target, by bisection.
inline double threshold_from_sdr(std::span<const double> x, double target_sdr_db, double tol_db = 1e-4) {
    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    if (peak == 0.0) throw UsageError("threshold_from_sdr: signal is silent");
    // clip(x, 0+) -> 0 gives 0 dB, clip(x, peak) gives +inf.
    if (!(target_sdr_db > 0.0) || !std::isfinite(target_sdr_db))
        throw UsageError("threshold_from_sdr: target SDR must be finite and > 0 dB");
    double lo = 0.0, hi = peak;
    double c = 0.5 * peak;
    for (int it = 0; it < 200; ++it) {
        c = 0.5 * (lo + hi);
        const double s = sdr_db(x, clip(x, c));
        if (std::abs(s - target_sdr_db) < tol_db) return c;
        (s < target_sdr_db ? lo : hi) = c;
    }
    return c;
}

/// A degradation bound to a segment length and sample rate.
class Degradation {
public:
    Degradation(const DegradationSpec& spec, std::size_t n, double fs) : spec_(spec), n_(n), fs_(fs) {
        if (const auto* lp = std::get_if<Lowpass>(&spec_)) {
            kernel_ = kaiser_lowpass_kernel(lp->cutoff_hz, fs, lp->order, lp->kaiser_beta);
        } else if (const auto* m = std::get_if<Mask>(&spec_)) {
            gap_ = mask_range(*m, n, fs);
        } else if (const auto* c = std::get_if<Clip>(&spec_)) {
            if (!(c->threshold > 0.0)) throw UsageError("clip: threshold must be positive");
        } else {
            throw UsageError("clip_sdr: resolve the SDR target to a threshold before building the operator");
        }
    }

    /// Replaces ClipBySdr by the Clip threshold that reaches its target on `clean`.
    static DegradationSpec resolve(const DegradationSpec& spec, std::span<const double> clean) {
        if (const auto* s = std::get_if<ClipBySdr>(&spec)) return Clip{threshold_from_sdr(clean, s->target_sdr_db)};
        return spec;
    }

    const DegradationSpec& spec() const { return spec_; }
    bool is_linear() const { return !std::holds_alternative<Clip>(spec_); }
    bool supports_data_consistency() const { return is_linear(); }
    std::size_t size() const { return n_; }
    const std::vector<double>& kernel() const { return kernel_; }
    std::pair<std::size_t, std::size_t> gap() const { return gap_; }

    std::vector<double> apply(std::span<const double> x) const {
        check(x);
        if (std::holds_alternative<Lowpass>(spec_)) return fir_centered(x, kernel_);
        if (std::holds_alternative<Mask>(spec_)) {
            std::vector<double> y(x.begin(), x.end());
            std::fill(y.begin() + static_cast<std::ptrdiff_t>(gap_.first), y.begin() + static_cast<std::ptrdiff_t>(gap_.second), 0.0);
            return y;
        }
        return clip(x, std::get<Clip>(spec_).threshold);
    }

    /// J_A(x)^T g.
    std::vector<double> vjp(std::span<const double> x, std::span<const double> g) const {
        check(x);
        check(g);
        if (!std::holds_alternative<Clip>(spec_)) return apply(g);
        const double c = std::get<Clip>(spec_).threshold;
        std::vector<double> out(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) out[i] = std::abs(x[i]) < c ? g[i] : 0.0;
        return out;
    }

    /// Data-consistent replacement of a clean-signal estimate.
    ///   lowpass: y + x0 - LPF(x0)
    ///   mask:    y outside the gap, x0 inside
    std::vector<double> data_consistency(std::span<const double> x0, std::span<const double> y) const {
        check(x0);
        check(y);
        if (!supports_data_consistency()) throw UsageError("data consistency unavailable for nonlinear degradation");
        std::vector<double> out(y.begin(), y.end());
        if (std::holds_alternative<Lowpass>(spec_)) {
            const auto lp = fir_centered(x0, kernel_);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[i] + x0[i] - lp[i];
        } else {
            std::copy(x0.begin() + static_cast<std::ptrdiff_t>(gap_.first), x0.begin() + static_cast<std::ptrdiff_t>(gap_.second),
                      out.begin() + static_cast<std::ptrdiff_t>(gap_.first));
        }
        return out;
    }

private:
    void check(std::span<const double> x) const {
        if (x.size() != n_) throw UsageError("degradation: length " + std::to_string(x.size()) + ", expected " + std::to_string(n_));
    }

    DegradationSpec spec_;
    std::size_t n_;
    double fs_;
    std::vector<double> kernel_;
    std::pair<std::size_t, std::size_t> gap_{0, 0};
};

}  // namespace cqtdiff
