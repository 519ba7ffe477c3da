#pragma once

// RIFF/WAVE reading and writing (PCM16, float32), stereo downmix, and
// polyphase windowed-sinc resampling.

#include "cqtdiff/common.hpp"
#include "cqtdiff/degrade.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace cqtdiff::app {

enum class WavFormat { pcm16, float32 };

namespace wavio {

inline std::uint32_t u32(const unsigned char* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24); }
inline std::uint16_t u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

inline void put32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>(v >> 8));
}

}  // namespace wavio

/// Rational resampler, fs_out/fs_in = up/down, with a Kaiser-windowed sinc
/// kernel of `zero_crossings` lobes per side at the lower of the two rates.
inline std::vector<double> resample(std::span<const double> x, long fs_in, long fs_out, int zero_crossings = 32, double beta = 8.0) {
    if (fs_in <= 0 || fs_out <= 0) throw UsageError("resample: sample rates must be positive");
    if (fs_in == fs_out) return {x.begin(), x.end()};
    const long g = std::gcd(fs_in, fs_out);
    const long up = fs_out / g, down = fs_in / g;
    const double r = std::min(1.0, double(up) / double(down));  // cutoff relative to input Nyquist
    const double half = zero_crossings / r;                    // kernel half-width in input samples
    const long K = static_cast<long>(std::ceil(half));
    const double i0b = bessel_i0(beta);

    // taps[phase][k], k = 0..2K-1 covering input offsets base - K + 1 + k
    std::vector<std::vector<double>> taps(static_cast<std::size_t>(up), std::vector<double>(static_cast<std::size_t>(2 * K)));
    for (long ph = 0; ph < up; ++ph) {
        const double frac = double(ph) / double(up);
        double sum = 0.0;
        for (long k = 0; k < 2 * K; ++k) {
            const double tau = frac - double(k - K + 1);  // position minus input index
            double v = 0.0;
            if (std::abs(tau) < half) {
                const double a = kPi * r * tau;
                const double sinc = tau == 0.0 ? 1.0 : std::sin(a) / a;
                const double q = tau / half;
                v = r * sinc * bessel_i0(beta * std::sqrt(1.0 - q * q)) / i0b;
            }
            taps[static_cast<std::size_t>(ph)][static_cast<std::size_t>(k)] = v;
            sum += v;
        }
        for (auto& v : taps[static_cast<std::size_t>(ph)]) v /= sum;
    }

    const auto n = static_cast<long>(x.size());
    const long out_len = (n * up + down - 1) / down;
    std::vector<double> y(static_cast<std::size_t>(out_len));
    for (long m = 0; m < out_len; ++m) {
        const long num = m * down;
        const long base = num / up, ph = num % up;
        const auto& t = taps[static_cast<std::size_t>(ph)];
        double acc = 0.0;
        for (long k = 0; k < 2 * K; ++k) {
            const long j = base - K + 1 + k;
            if (j >= 0 && j < n) acc += t[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(j)];
        }
        y[static_cast<std::size_t>(m)] = acc;
    }
    return y;
}

/// Decodes a WAV file to mono doubles. With `target_rate` > 0 the result is
/// resampled to that rate.
inline AudioSegment load_wav(const std::string& path, double target_rate = kDefaultSampleRate) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("wav: cannot open '" + path + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto bad = [&](const std::string& why) { return UsageError("wav: '" + path + "': " + why); };
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw bad("not a RIFF/WAVE file");

    std::uint16_t fmt_tag = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::size_t data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = wavio::u32(buf.data() + pos + 4);
        const unsigned char* body = buf.data() + pos + 8;
        const std::size_t avail = buf.size() - pos - 8;
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
            if (len < 16 || avail < 16) throw bad("truncated fmt chunk");
            fmt_tag = wavio::u16(body);
            channels = wavio::u16(body + 2);
            rate = wavio::u32(body + 4);
            bits = wavio::u16(body + 14);
            if (fmt_tag == 0xFFFE) {
                if (len < 40 || avail < 40) throw bad("truncated extensible fmt chunk");
                fmt_tag = wavio::u16(body + 24);
            }
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            data = body;
            data_len = std::min<std::size_t>(len, avail);
        }
        pos += 8 + len + (len & 1);
    }
    if (channels == 0 || rate == 0) throw bad("missing fmt chunk");
    if (!data) throw bad("missing data chunk");
    const bool pcm16 = fmt_tag == 1 && bits == 16;
    const bool f32 = fmt_tag == 3 && bits == 32;
    if (!pcm16 && !f32) throw bad("unsupported codec (format " + std::to_string(fmt_tag) + ", " + std::to_string(bits) + " bits)");

    const std::size_t width = bits / 8, frame = width * channels;
    const std::size_t frames = data_len / frame;
    std::vector<double> mono(frames, 0.0);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const unsigned char* p = data + i * frame + c * width;
            if (pcm16) {
                acc += static_cast<std::int16_t>(wavio::u16(p)) / 32768.0;
            } else {
                const std::uint32_t u = wavio::u32(p);
                float v;
                std::memcpy(&v, &u, 4);
                acc += v;
            }
        }
        mono[i] = channels == 1 ? acc : acc / channels;
    }
    if (!all_finite(mono)) throw bad("non-finite samples");
    AudioSegment seg(std::move(mono), double(rate));
    if (target_rate > 0.0 && double(rate) != target_rate) {
        seg.samples = resample(seg.samples, static_cast<long>(rate), std::lround(target_rate));
        seg.sample_rate_hz = target_rate;
    }
    return seg;
}

inline void save_wav(const AudioSegment& seg, const std::string& path, WavFormat format = WavFormat::float32) {
    const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
    const std::uint32_t rate = static_cast<std::uint32_t>(std::lround(seg.sample_rate_hz));
    const std::uint32_t data_len = static_cast<std::uint32_t>(seg.size() * (bits / 8));
    std::string out;
    out.reserve(44 + data_len);
    out += "RIFF";
    wavio::put32(out, 36 + data_len);
    out += "WAVEfmt ";
    wavio::put32(out, 16);
    wavio::put16(out, format == WavFormat::pcm16 ? 1 : 3);
    wavio::put16(out, 1);
    wavio::put32(out, rate);
    wavio::put32(out, rate * (bits / 8));
    wavio::put16(out, bits / 8);
    wavio::put16(out, bits);
    out += "data";
    wavio::put32(out, data_len);
    for (double v : seg.samples) {
        if (format == WavFormat::pcm16) {
            const double s = std::clamp(v, -1.0, 32767.0 / 32768.0);
            wavio::put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(s * 32768.0))));
        } else {
            const float fv = static_cast<float>(v);
            std::uint32_t u;
            std::memcpy(&u, &fv, 4);
            wavio::put32(out, u);
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw UsageError("wav: cannot write '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw UsageError("wav: write failed for '" + path + "'");
}

}  // namespace cqtdiff::app
