#pragma once

// Objective metrics that need no pretrained model.

#include "cqtdiff/degrade.hpp"
#include "cqtdiff/fft.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace cqtdiff {

struct LsdSettings {
    std::size_t window = 1024;
    std::size_t hop = 256;
    double power_floor = 1e-10;
};

namespace detail {

// log10 power spectra of Hann-windowed frames. Signals shorter than one
// window are zero-padded into a single frame.
inline std::vector<std::vector<double>> log_power_frames(std::span<const double> x, const LsdSettings& s) {
    std::vector<double> win(s.window);
    for (std::size_t i = 0; i < s.window; ++i) win[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * double(i) / double(s.window));
    const std::size_t frames = x.size() <= s.window ? 1 : 1 + (x.size() - s.window) / s.hop;
    std::vector<std::vector<double>> out(frames);
    std::vector<double> buf(s.window);
    std::vector<fft::cplx> spec(s.window / 2 + 1);
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t i = 0; i < s.window; ++i) {
            const std::size_t j = f * s.hop + i;
            buf[i] = j < x.size() ? x[j] * win[i] : 0.0;
        }
        fft::real_forward(buf, spec);
        out[f].resize(spec.size());
        for (std::size_t k = 0; k < spec.size(); ++k) out[f][k] = std::log10(std::max(std::norm(spec[k]), s.power_floor));
    }
    return out;
}

}  // namespace detail

/// Mean over frames of the RMS over bins of the log10 power difference.
inline double lsd(std::span<const double> reference, std::span<const double> estimate, const LsdSettings& s = {}) {
    if (reference.size() != estimate.size()) throw UsageError("lsd: length mismatch");
    if (s.window < 2 || s.hop < 1) throw UsageError("lsd: invalid STFT settings");
    const auto a = detail::log_power_frames(reference, s);
    const auto b = detail::log_power_frames(estimate, s);
    double total = 0.0;
    for (std::size_t f = 0; f < a.size(); ++f) {
        double acc = 0.0;
        for (std::size_t k = 0; k < a[f].size(); ++k) acc += (a[f][k] - b[f][k]) * (a[f][k] - b[f][k]);
        total += std::sqrt(acc / double(a[f].size()));
    }
    return total / double(a.size());
}

/// 10 log10(|r|^2 / |r - e|^2); +inf when the estimate equals the reference.
inline double sdr(std::span<const double> reference, std::span<const double> estimate) { return sdr_db(reference, estimate); }

}  // namespace cqtdiff
