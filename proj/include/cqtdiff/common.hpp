#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cqtdiff {

inline constexpr double kDefaultSampleRate = 22050.0;
inline constexpr double kPi = std::numbers::pi;

/// Raised for invalid user input: bad shapes, bad parameters, malformed files.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces non-finite values (diverged training,
/// degenerated sampling trajectory).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Mono waveform at a fixed sample rate.
struct AudioSegment {
    std::vector<double> samples;
    double sample_rate_hz = kDefaultSampleRate;

    AudioSegment() = default;
    explicit AudioSegment(std::size_t n, double fs = kDefaultSampleRate) : samples(n, 0.0), sample_rate_hz(fs) {}
    AudioSegment(std::vector<double> s, double fs) : samples(std::move(s)), sample_rate_hz(fs) {}

    std::size_t size() const { return samples.size(); }
    double duration() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
    std::span<const double> view() const { return samples; }
};

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw UsageError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw UsageError(what);
}

}  // namespace cqtdiff
