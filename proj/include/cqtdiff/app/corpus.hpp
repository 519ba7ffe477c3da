#pragma once

// Synthetic harmonic-tone corpus standing in for recorded piano.

#include "cqtdiff/common.hpp"
#include "cqtdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cqtdiff::app {

struct CorpusSpec {
    std::uint64_t seed = 1;
    std::size_t items = 2000;
    std::size_t samples = 4096;
    double sample_rate_hz = kDefaultSampleRate;
    double f0_min_hz = 100.0;
    double f0_max_hz = 2000.0;
    int harmonics_min = 4;
    int harmonics_max = 10;
    double peak = 0.95;
};

/// Notes played in one item; recorded so analyses can check the generator.
struct NoteEvent {
    double f0_hz;
    int harmonics;
    double onset_s;
    double decay_s;
};

/// One item: 1 to 3 notes, each a sum of harmonics with 1/h amplitudes,
/// random phases, a 5 ms attack and an exponential decay.
inline std::vector<double> synth_item(const CorpusSpec& spec, std::size_t index, std::vector<NoteEvent>* notes = nullptr) {
    CounterRng rng(spec.seed, 0xC0'5E'ED, index);
    const double fs = spec.sample_rate_hz;
    const double dur = double(spec.samples) / fs;
    const double u = rng.uniform();
    const int count = 1 + (u < 0.35) + (u < 0.1);
    std::vector<double> x(spec.samples, 0.0);
    for (int n = 0; n < count; ++n) {
        const double f0 = spec.f0_min_hz * std::pow(spec.f0_max_hz / spec.f0_min_hz, rng.uniform());
        int H = spec.harmonics_min + static_cast<int>(rng.uniform() * (spec.harmonics_max - spec.harmonics_min + 1));
        H = std::min(H, spec.harmonics_max);
        const double onset = n == 0 ? rng.uniform(0.0, 0.25 * dur) : rng.uniform(0.0, 0.75 * dur);
        const double decay = rng.uniform(0.1, 1.0);
        const double gain = n == 0 ? 1.0 : rng.uniform(0.3, 1.0);
        if (notes) notes->push_back({f0, H, onset, decay});
        std::vector<double> phase(static_cast<std::size_t>(H));
        for (auto& p : phase) p = rng.uniform(0.0, 2.0 * kPi);
        const auto start = static_cast<std::size_t>(std::ceil(onset * fs));
        for (std::size_t i = start; i < x.size(); ++i) {
            const double t = double(i) / fs - onset;
            const double env = gain * std::min(1.0, t / 0.005) * std::exp(-t / decay);
            double v = 0.0;
            for (int h = 1; h <= H; ++h) {
                const double f = h * f0;
                if (f >= 0.45 * fs) break;
                v += std::sin(2.0 * kPi * f * t + phase[static_cast<std::size_t>(h - 1)]) / h;
            }
            x[i] += env * v;
        }
    }
    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    if (peak > 0.0)
        for (auto& v : x) v *= spec.peak / peak;
    return x;
}

inline std::vector<std::vector<double>> gen_synthetic_corpus(const CorpusSpec& spec) {
    if (spec.items < 1) throw UsageError("corpus: at least one item required");
    if (spec.samples < 1) throw UsageError("corpus: items must be nonempty");
    std::vector<std::vector<double>> out;
    out.reserve(spec.items);
    for (std::size_t i = 0; i < spec.items; ++i) out.push_back(synth_item(spec, i));
    return out;
}

}  // namespace cqtdiff::app
