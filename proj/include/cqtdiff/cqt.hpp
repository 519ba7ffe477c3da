#pragma once

// Rasterized constant-Q transform on a painless non-stationary Gabor frame.
//
// The frame is built in the frequency domain over an L-point DFT. Each band
// owns a real window w_b over a contiguous run of DFT bins; its coefficients
// are the M-point inverse DFT of the windowed spectrum folded modulo M, which
// puts every band on the same time grid with hop L / M. M is the smallest
// power of two holding the widest window, so the frame is painless and the
// frame operator is diagonal in frequency. Perfect reconstruction uses the
// canonical dual windows w_b / d, with d the symmetrized sum of squared
// windows.
//
// Row layout of a spectrogram: row 0 is the lowpass residual band (DC up to
// f_min), rows 1..B*O are the log-spaced bands in increasing frequency, and
// the last row is the highpass residual band (top band up to Nyquist).
//
// Coefficients are scaled by 1/sqrt(hop) so the frame operator is bounded by
// one. Inner products on spectrograms are Re(sum c * conj(d)); on signals the
// ordinary real dot product. adjoint_forward and adjoint_inverse are exact
// adjoints under these conventions.

#include "cqtdiff/common.hpp"
#include "cqtdiff/fft.hpp"

#include <algorithm>
#include <complex>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace cqtdiff {

using cplx = std::complex<double>;

enum class WindowKind { hann };

struct CqtConfig {
    int bins_per_octave = 64;
    int octaves = 7;
    double sample_rate_hz = kDefaultSampleRate;
    /// 0 selects the default, (fs / 2) / 2^octaves, which puts the top band
    /// edge exactly at Nyquist.
    double f_min_hz = 0.0;
    WindowKind window = WindowKind::hann;

    double resolved_f_min() const {
        return f_min_hz > 0.0 ? f_min_hz : 0.5 * sample_rate_hz / std::exp2(octaves);
    }

    void validate() const {
        require(bins_per_octave >= 1, "cqt: bins_per_octave must be >= 1");
        require(octaves >= 1, "cqt: octaves must be >= 1");
        require(sample_rate_hz > 0.0, "cqt: sample rate must be positive");
        require(f_min_hz >= 0.0, "cqt: f_min must be positive");
        const double top = resolved_f_min() * std::exp2(octaves);
        require(top <= 0.5 * sample_rate_hz * (1.0 + 1e-12), "cqt: highest band exceeds Nyquist");
    }

    int log_bands() const { return bins_per_octave * octaves; }
    int band_count() const { return log_bands() + 2; }

    friend bool operator==(const CqtConfig&, const CqtConfig&) = default;
};

struct BandWindow {
    /// First DFT bin of the support; may be negative (wraps modulo L).
    std::ptrdiff_t start = 0;
    std::vector<double> analysis;
    std::vector<double> dual;
    double center_hz = 0.0;
};

class CqtPlan {
public:
    CqtConfig config;
    std::size_t signal_len = 0;
    std::size_t frames = 0;      // M, coefficients per band
    std::size_t raster_hop = 0;  // L / M
    std::vector<BandWindow> bands;
    std::uint64_t id = 0;

    std::size_t band_count() const { return bands.size(); }
};

struct CqtSpectrogram {
    std::size_t bands = 0;
    std::size_t frames = 0;
    std::vector<cplx> coeffs;  // band-major, bands x frames
    std::uint64_t plan_id = 0;

    CqtSpectrogram() = default;
    CqtSpectrogram(std::size_t b, std::size_t f, std::uint64_t id)
        : bands(b), frames(f), coeffs(b * f), plan_id(id) {}

    cplx& at(std::size_t b, std::size_t n) { return coeffs[b * frames + n]; }
    const cplx& at(std::size_t b, std::size_t n) const { return coeffs[b * frames + n]; }
    std::span<cplx> row(std::size_t b) { return {coeffs.data() + b * frames, frames}; }
    std::span<const cplx> row(std::size_t b) const { return {coeffs.data() + b * frames, frames}; }

    static CqtSpectrogram zeros_like(const CqtPlan& plan) {
        return CqtSpectrogram(plan.band_count(), plan.frames, plan.id);
    }
};

/// Real inner product Re(sum a * conj(b)).
inline double inner(const CqtSpectrogram& a, const CqtSpectrogram& b) {
    require(a.coeffs.size() == b.coeffs.size(), "cqt: spectrogram shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.coeffs.size(); ++i)
        s += a.coeffs[i].real() * b.coeffs[i].real() + a.coeffs[i].imag() * b.coeffs[i].imag();
    return s;
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t double_bits(double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, sizeof u);
    return u;
}

inline std::size_t wrap(std::ptrdiff_t v, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
}

inline double rising_hann(double pos) { return 0.5 * (1.0 - std::cos(kPi * pos)); }
inline double falling_hann(double pos) { return 0.5 * (1.0 + std::cos(kPi * pos)); }

// Collects the bins in [first, last] where `value` is strictly positive.
template <class Fn>
BandWindow sample_window(std::ptrdiff_t first, std::ptrdiff_t last, double df, double center, Fn&& value) {
    BandWindow w;
    w.center_hz = center;
    std::ptrdiff_t lo = last + 1, hi = first - 1;
    for (std::ptrdiff_t v = first; v <= last; ++v) {
        if (value(static_cast<double>(v) * df) > 0.0) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (lo > hi) return w;
    w.start = lo;
    for (std::ptrdiff_t v = lo; v <= hi; ++v) w.analysis.push_back(value(static_cast<double>(v) * df));
    return w;
}

inline std::vector<cplx> full_spectrum(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<cplx> half(n / 2 + 1);
    fft::real_forward(x, half);
    std::vector<cplx> full(n);
    for (std::size_t k = 0; k <= n / 2; ++k) full[k] = half[k];
    for (std::size_t k = n / 2 + 1; k < n; ++k) full[k] = std::conj(half[n - k]);
    return full;
}

// Per-band windowing of a spectrum followed by an M-point inverse DFT.
inline CqtSpectrogram analyze(const CqtPlan& plan, std::span<const cplx> spectrum, bool dual, double scale) {
    CqtSpectrogram out = CqtSpectrogram::zeros_like(plan);
    const std::size_t L = plan.signal_len, M = plan.frames;
    std::vector<cplx> buf(M);
    for (std::size_t b = 0; b < plan.bands.size(); ++b) {
        const BandWindow& w = plan.bands[b];
        const auto& win = dual ? w.dual : w.analysis;
        if (win.empty()) continue;
        std::fill(buf.begin(), buf.end(), cplx{});
        for (std::size_t j = 0; j < win.size(); ++j) {
            const std::size_t nu = wrap(w.start + static_cast<std::ptrdiff_t>(j), L);
            buf[nu % M] += win[j] * spectrum[nu];
        }
        auto row = out.row(b);
        fft::backward(buf, row);
        for (auto& c : row) c *= scale;
    }
    return out;
}

// Real part of the inverse L-point DFT of sum_b win_b * FFT_M(row_b), times scale.
inline std::vector<double> synthesize(const CqtPlan& plan, const CqtSpectrogram& s, bool dual, double scale) {
    const std::size_t L = plan.signal_len, M = plan.frames;
    std::vector<cplx> acc(L), buf(M);
    for (std::size_t b = 0; b < plan.bands.size(); ++b) {
        const BandWindow& w = plan.bands[b];
        const auto& win = dual ? w.dual : w.analysis;
        if (win.empty()) continue;
        fft::forward(s.row(b), buf);
        for (std::size_t j = 0; j < win.size(); ++j) {
            const std::size_t nu = wrap(w.start + static_cast<std::ptrdiff_t>(j), L);
            acc[nu] += win[j] * buf[nu % M];
        }
    }
    // Re(ifft(acc)) is the inverse transform of the Hermitian part of acc.
    std::vector<cplx> herm(L / 2 + 1);
    for (std::size_t k = 0; k <= L / 2; ++k) herm[k] = 0.5 * (acc[k] + std::conj(acc[(L - k) % L]));
    std::vector<double> x(L);
    fft::real_backward(herm, x);
    const double f = scale / static_cast<double>(L);
    for (auto& v : x) v *= f;
    return x;
}

inline void check_plan(const CqtPlan& plan, const CqtSpectrogram& s) {
    if (s.plan_id != plan.id || s.bands != plan.band_count() || s.frames != plan.frames)
        throw UsageError("cqt: spectrogram was not produced by this plan");
}

template <class Real>
std::vector<double> to_double(std::span<const Real> x) {
    return std::vector<double>(x.begin(), x.end());
}

}  // namespace detail

inline CqtPlan build_plan(const CqtConfig& config, std::size_t signal_len) {
    config.validate();
    require(fft::is_power_of_two(signal_len) && signal_len >= 8, "cqt: signal length must be a power of two");

    CqtPlan plan;
    plan.config = config;
    plan.signal_len = signal_len;

    const double fs = config.sample_rate_hz;
    const double df = fs / static_cast<double>(signal_len);
    const auto half = static_cast<std::ptrdiff_t>(signal_len / 2);
    const double fmin = config.resolved_f_min();
    const int bpo = config.bins_per_octave;
    const int K = config.log_bands();
    auto center = [&](int k) { return fmin * std::exp2(static_cast<double>(k) / bpo); };

    const double low_edge = center(-1), low_top = center(0);
    plan.bands.push_back(detail::sample_window(-half, half, df, 0.0, [&](double f) {
        const double a = std::abs(f);
        if (a <= low_edge) return 1.0;
        if (a >= low_top) return 0.0;
        return detail::falling_hann((a - low_edge) / (low_top - low_edge));
    }));

    for (int k = 0; k < K; ++k) {
        const double lo = center(k - 1), c = center(k), hi = center(k + 1);
        plan.bands.push_back(detail::sample_window(1, half, df, c, [&](double f) {
            if (f <= lo || f >= hi) return 0.0;
            if (f <= c) return detail::rising_hann((f - lo) / (c - lo));
            return detail::falling_hann((f - c) / (hi - c));
        }));
    }

    // Highpass residual: rising from the top band center, flat up to Nyquist,
    // mirrored about Nyquist so the support is contiguous through L/2.
    const double hp_lo = center(K - 1), hp_hi = center(K);
    auto hp = detail::sample_window(1, static_cast<std::ptrdiff_t>(signal_len) - 1, df, 0.5 * fs, [&](double f) {
        const double a = f <= 0.5 * fs ? f : fs - f;
        if (a <= hp_lo) return 0.0;
        if (a >= hp_hi) return 1.0;
        return detail::rising_hann((a - hp_lo) / (hp_hi - hp_lo));
    });
    plan.bands.push_back(std::move(hp));

    std::size_t widest = 1;
    for (const auto& w : plan.bands) widest = std::max(widest, w.analysis.size());
    std::size_t M = 1;
    while (M < widest) M <<= 1;
    if (M > signal_len || signal_len % M != 0) throw UsageError("cqt: signal length not divisible by raster hop");
    plan.frames = M;
    plan.raster_hop = signal_len / M;

    // Diagonal of the frame operator, symmetrized over +-nu (real signals).
    std::vector<double> power(signal_len, 0.0);
    for (const auto& w : plan.bands)
        for (std::size_t j = 0; j < w.analysis.size(); ++j)
            power[detail::wrap(w.start + static_cast<std::ptrdiff_t>(j), signal_len)] += w.analysis[j] * w.analysis[j];
    std::vector<double> diag(signal_len);
    for (std::size_t nu = 0; nu < signal_len; ++nu) {
        diag[nu] = 0.5 * (power[nu] + power[(signal_len - nu) % signal_len]);
        if (!(diag[nu] > 1e-12)) throw UsageError("cqt: frame does not cover the full spectrum");
    }
    for (auto& w : plan.bands) {
        w.dual.resize(w.analysis.size());
        for (std::size_t j = 0; j < w.analysis.size(); ++j)
            w.dual[j] = w.analysis[j] / diag[detail::wrap(w.start + static_cast<std::ptrdiff_t>(j), signal_len)];
    }

    std::uint64_t h = 14695981039346656037ull;
    h = detail::fnv1a(h, static_cast<std::uint64_t>(config.bins_per_octave));
    h = detail::fnv1a(h, static_cast<std::uint64_t>(config.octaves));
    h = detail::fnv1a(h, detail::double_bits(config.sample_rate_hz));
    h = detail::fnv1a(h, detail::double_bits(fmin));
    h = detail::fnv1a(h, signal_len);
    plan.id = h;
    return plan;
}

template <class Real>
CqtSpectrogram forward(const CqtPlan& plan, std::span<const Real> x) {
    if (x.size() != plan.signal_len) throw UsageError("cqt: signal length does not match plan");
    const auto xd = detail::to_double(x);
    const auto spec = detail::full_spectrum(xd);
    const double scale = 1.0 / (std::sqrt(static_cast<double>(plan.raster_hop)) * static_cast<double>(plan.frames));
    return detail::analyze(plan, spec, false, scale);
}

inline CqtSpectrogram forward(const CqtPlan& plan, const AudioSegment& x) {
    return forward(plan, std::span<const double>(x.samples));
}

inline std::vector<double> inverse(const CqtPlan& plan, const CqtSpectrogram& s) {
    detail::check_plan(plan, s);
    return detail::synthesize(plan, s, true, std::sqrt(static_cast<double>(plan.raster_hop)));
}

inline std::vector<double> adjoint_forward(const CqtPlan& plan, const CqtSpectrogram& s) {
    detail::check_plan(plan, s);
    return detail::synthesize(plan, s, false, std::sqrt(static_cast<double>(plan.raster_hop)));
}

template <class Real>
CqtSpectrogram adjoint_inverse(const CqtPlan& plan, std::span<const Real> x) {
    if (x.size() != plan.signal_len) throw UsageError("cqt: signal length does not match plan");
    const auto xd = detail::to_double(x);
    const auto spec = detail::full_spectrum(xd);
    const double scale = std::sqrt(static_cast<double>(plan.raster_hop)) / static_cast<double>(plan.signal_len);
    return detail::analyze(plan, spec, true, scale);
}

/// Magnitude of every coefficient, band-major.
inline std::vector<double> magnitude(const CqtSpectrogram& s) {
    std::vector<double> m(s.coeffs.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::abs(s.coeffs[i]);
    return m;
}

}  // namespace cqtdiff
