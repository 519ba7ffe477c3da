#pragma once

// Preconditioned denoiser
//
//   D(x, sigma) = c_skip(sigma) x + c_out(sigma) ICQT(F'(CQT(c_in(sigma) x), emb(sigma)))
//
// F' is a U-Net over the two-channel (real, imaginary) rasterized CQT. Only
// the time axis is resampled between levels; the frequency axis keeps full
// resolution and is mixed by stacks of dilated frequency convolutions inside
// each residual block. The noise level enters as random Fourier features of
// ln(sigma)/4 followed by a two-layer perceptron, applied through FiLM in
// every block. Random-Fourier positional channels over the normalized bin
// index are concatenated to the network input.

#include "cqtdiff/cqt.hpp"
#include "cqtdiff/params.hpp"
#include "cqtdiff/rng.hpp"

#include <string>
#include <vector>

namespace cqtdiff {

struct DenoiserConfig {
    int depth = 3;
    int base_channels = 32;
    std::vector<int> dilations = {1, 2, 4, 8};
    int rff_features = 32;
    int embed_dim = 128;
    int positional_channels = 8;
    int kernel_size = 3;
    CqtConfig cqt;

    void validate() const {
        cqt.validate();
        require(depth >= 1, "denoiser: depth must be >= 1");
        require(base_channels >= 1, "denoiser: base_channels must be >= 1");
        require(!dilations.empty(), "denoiser: dilation stack is empty");
        for (std::size_t i = 0; i < dilations.size(); ++i) {
            require(dilations[i] >= 1, "denoiser: dilations must be >= 1");
            if (i > 0) require(dilations[i] > dilations[i - 1], "denoiser: dilations must be strictly increasing");
        }
        require(rff_features >= 1 && embed_dim >= 1, "denoiser: embedding sizes must be positive");
        require(positional_channels >= 0 && positional_channels % 2 == 0, "denoiser: positional channels must be even");
        require(kernel_size >= 1 && kernel_size % 2 == 1, "denoiser: kernel size must be odd");
    }

    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// Dataset standard deviation used by the preconditioning.
class SigmaData {
public:
    explicit SigmaData(double v) : value_(v) {
        if (!std::isfinite(v) || !(v > 0.0)) throw UsageError("sigma_data must be finite and positive");
    }
    double value() const { return value_; }

private:
    double value_;
};

/// Input, skip and output scalings that keep the network's input and target
/// near unit variance, plus the matching loss weight.
struct Preconditioning {
    double sigma_data;

    double c_in(double s) const { return 1.0 / std::sqrt(s * s + sigma_data * sigma_data); }
    double c_skip(double s) const { return sigma_data * sigma_data / (s * s + sigma_data * sigma_data); }
    double c_out(double s) const { return s * sigma_data / std::sqrt(s * s + sigma_data * sigma_data); }
    static double c_noise(double s) { return 0.25 * std::log(s); }
    double loss_weight(double s) const {
        const double c = c_out(s);
        return 1.0 / (c * c);
    }
};

template <class T>
class Denoiser {
public:
    Denoiser(DenoiserConfig config, std::size_t signal_len, SigmaData sigma_data)
        : config_(std::move(config)), plan_(build_plan(config_.cqt, signal_len)), sigma_data_(sigma_data) {
        config_.validate();
        if (plan_.frames % (std::size_t{1} << config_.depth) != 0)
            throw UsageError("denoiser: CQT frames not divisible by 2^depth");
    }

    // The tape closures of cqt_forward/cqt_inverse point at plan_.
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    const DenoiserConfig& config() const { return config_; }
    const CqtPlan& plan() const { return plan_; }
    std::size_t signal_len() const { return plan_.signal_len; }
    double sigma_data() const { return sigma_data_.value(); }
    Preconditioning preconditioning() const { return {sigma_data_.value()}; }

    /// Fresh parameters. The output projection is zero unless
    /// `zero_output` is false, so a new model starts at D = c_skip x.
    grad::ParamStore<T> init_params(std::uint64_t seed, bool zero_output = true) const {
        using grad::Tensor;
        grad::ParamStore<T> p;
        CounterRng rng(seed, 0x5eed);
        auto normal = [&](grad::Shape s, double stddev) {
            Tensor<T> t(std::move(s));
            for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
            return t;
        };
        const auto C = static_cast<std::size_t>(config_.base_channels);
        const auto E = static_cast<std::size_t>(config_.embed_dim);
        const auto R = static_cast<std::size_t>(config_.rff_features);
        const auto K = static_cast<std::size_t>(config_.kernel_size);
        const auto P = static_cast<std::size_t>(config_.positional_channels);

        p.add("noise.rff_freq", normal({R}, 1.0), false);
        p.add("noise.mlp0.w", normal({E, 2 * R}, 1.0 / std::sqrt(2.0 * R)));
        p.add("noise.mlp0.b", Tensor<T>({E}));
        p.add("noise.mlp1.w", normal({E, E}, 1.0 / std::sqrt(double(E))));
        p.add("noise.mlp1.b", Tensor<T>({E}));
        if (P > 0) p.add("pos.rff_freq", normal({P / 2}, 4.0), false);

        p.add("in.w", normal({C, 2 + P, K}, 1.0 / std::sqrt(double((2 + P) * K))));
        auto add_block = [&](const std::string& prefix) {
            p.add(prefix + ".film_scale.w", Tensor<T>({C, E}));
            p.add(prefix + ".film_scale.b", Tensor<T>({C}));
            p.add(prefix + ".film_shift.w", normal({C, E}, 0.1 / std::sqrt(double(E))));
            p.add(prefix + ".film_shift.b", Tensor<T>({C}));
            for (std::size_t j = 0; j < config_.dilations.size(); ++j)
                p.add(prefix + ".conv" + std::to_string(j) + ".w", normal({C, C, K}, std::sqrt(2.0 / double(C * K))));
        };
        for (int l = 0; l < config_.depth; ++l) {
            add_block("enc" + std::to_string(l));
            p.add("enc" + std::to_string(l) + ".prog.w", normal({C, 2, 1}, 1.0 / std::sqrt(2.0)));
            add_block("dec" + std::to_string(l));
        }
        add_block("mid");
        p.add("out.w", zero_output ? Tensor<T>({2, C, K}) : normal({2, C, K}, 1.0 / std::sqrt(double(C * K))));
        return p;
    }

    /// Random Fourier features of ln(sigma)/4: [cos(2 pi f c), sin(2 pi f c)].
    grad::Tensor<T> noise_features(double sigma, const grad::ParamStore<T>& params) const {
        if (!(sigma > 0.0)) throw UsageError("denoiser: sigma must be positive");
        const double c = Preconditioning::c_noise(sigma);
        const auto& freq = params.get("noise.rff_freq");
        grad::Tensor<T> out({2 * freq.size()});
        for (std::size_t i = 0; i < freq.size(); ++i) {
            const double a = 2.0 * kPi * static_cast<double>(freq[i]) * c;
            out[i] = static_cast<T>(std::cos(a));
            out[freq.size() + i] = static_cast<T>(std::sin(a));
        }
        return out;
    }

    grad::Var<T> noise_embed(grad::Tape<T>& tape, const grad::ParamStore<T>& params, double sigma) const {
        auto feats = tape.constant(noise_features(sigma, params));
        auto h = grad::gelu(grad::linear(feats, params.var(tape, "noise.mlp0.w"), params.var(tape, "noise.mlp0.b")));
        return grad::gelu(grad::linear(h, params.var(tape, "noise.mlp1.w"), params.var(tape, "noise.mlp1.b")));
    }

    /// Positional channels [P, F, M]: Fourier features of bin / (F - 1),
    /// constant along time.
    grad::Tensor<T> positional_channels(const grad::ParamStore<T>& params, bool enabled = true) const {
        const std::size_t P = static_cast<std::size_t>(config_.positional_channels);
        const std::size_t F = plan_.band_count(), M = plan_.frames;
        grad::Tensor<T> out({P, F, M});
        if (P == 0 || !enabled) return out;
        const auto& freq = params.get("pos.rff_freq");
        for (std::size_t j = 0; j < P / 2; ++j)
            for (std::size_t f = 0; f < F; ++f) {
                const double pos = F > 1 ? static_cast<double>(f) / static_cast<double>(F - 1) : 0.0;
                const double a = 2.0 * kPi * static_cast<double>(freq[j]) * pos;
                const T cv = static_cast<T>(std::cos(a)), sv = static_cast<T>(std::sin(a));
                std::fill_n(out.ptr() + (j * F + f) * M, M, cv);
                std::fill_n(out.ptr() + ((P / 2 + j) * F + f) * M, M, sv);
            }
        return out;
    }

    struct RawOptions {
        bool positional = true;
    };

    /// Transform-domain network: [2, F, M] in, [2, F, M] out.
    grad::Var<T> f_raw(grad::Tape<T>& tape, const grad::Var<T>& spec, const grad::Var<T>& emb,
                       const grad::ParamStore<T>& params, RawOptions opts = {}) const {
        const grad::Shape expected{2, plan_.band_count(), plan_.frames};
        if (spec.shape() != expected)
            throw UsageError("denoiser: input shape " + grad::to_string(spec.shape()) + ", expected " + grad::to_string(expected));
        const T res_scale = static_cast<T>(1.0 / std::sqrt(2.0));
        auto P = [&](const std::string& name) { return params.var(tape, name); };

        grad::Var<T> h = spec;
        if (config_.positional_channels > 0)
            h = grad::concat_channels<T>({spec, tape.constant(positional_channels(params, opts.positional))});
        h = grad::conv1d_freq(h, P("in.w"), 1);

        std::vector<grad::Var<T>> skips;
        grad::Var<T> progressive = spec;
        for (int l = 0; l < config_.depth; ++l) {
            const std::string name = "enc" + std::to_string(l);
            h = rblock(tape, h, emb, params, name);
            skips.push_back(h);
            h = grad::downsample_time(h);
            progressive = grad::downsample_time(progressive);
            h = grad::add(h, grad::conv1d_freq(progressive, P(name + ".prog.w"), 1));
        }
        h = rblock(tape, h, emb, params, "mid");
        for (int l = config_.depth - 1; l >= 0; --l) {
            h = grad::upsample_time(h);
            h = grad::scale(grad::add(h, skips[static_cast<std::size_t>(l)]), res_scale);
            h = rblock(tape, h, emb, params, "dec" + std::to_string(l));
        }
        return grad::conv1d_freq(h, P("out.w"), 1);
    }

    /// Differentiable D(x_t, sigma) for a [L] signal variable.
    grad::Var<T> denoise(grad::Tape<T>& tape, const grad::Var<T>& x_t, double sigma, const grad::ParamStore<T>& params) const {
        if (!(sigma > 0.0)) throw UsageError("denoiser: sigma must be positive");
        if (x_t.shape() != grad::Shape{plan_.signal_len}) throw UsageError("denoiser: signal length does not match plan");
        const Preconditioning pc = preconditioning();
        auto scaled = grad::scale(x_t, static_cast<T>(pc.c_in(sigma)));
        auto spec = grad::complex_unpack(grad::cqt_forward(scaled, plan_));
        auto emb = noise_embed(tape, params, sigma);
        auto out = f_raw(tape, spec, emb, params);
        auto fx = grad::cqt_inverse(grad::complex_pack(out), plan_);
        return grad::add(grad::scale(x_t, static_cast<T>(pc.c_skip(sigma))), grad::scale(fx, static_cast<T>(pc.c_out(sigma))));
    }

    /// Value-only evaluation of D(x_t, sigma).
    std::vector<double> denoise(std::span<const double> x_t, double sigma, const grad::ParamStore<T>& params) const {
        grad::Tape<T> tape;
        auto x = tape.constant(to_tensor(x_t));
        auto d = denoise(tape, x, sigma, params);
        return std::vector<double>(d.value().data.begin(), d.value().data.end());
    }

    static grad::Tensor<T> to_tensor(std::span<const double> x) {
        grad::Tensor<T> t({x.size()});
        for (std::size_t i = 0; i < x.size(); ++i) t[i] = static_cast<T>(x[i]);
        return t;
    }

private:
    grad::Var<T> rblock(grad::Tape<T>& tape, grad::Var<T> h, const grad::Var<T>& emb, const grad::ParamStore<T>& params,
                        const std::string& prefix) const {
        auto P = [&](const std::string& name) { return params.var(tape, prefix + name); };
        auto delta = grad::linear(emb, P(".film_scale.w"), P(".film_scale.b"));
        auto shift = grad::linear(emb, P(".film_shift.w"), P(".film_shift.b"));
        h = grad::film(h, delta, shift);
        const T res_scale = static_cast<T>(1.0 / std::sqrt(2.0));
        for (std::size_t j = 0; j < config_.dilations.size(); ++j) {
            auto branch = grad::conv1d_freq(grad::gelu(h), P(".conv" + std::to_string(j) + ".w"), config_.dilations[j]);
            h = grad::scale(grad::add(h, branch), res_scale);
        }
        return h;
    }

    DenoiserConfig config_;
    CqtPlan plan_;
    SigmaData sigma_data_;
};

}  // namespace cqtdiff
