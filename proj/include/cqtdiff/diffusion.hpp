#pragma once

// Variance-exploding diffusion with sigma(t) = t: noise schedule, training
// loss, the stochastic second-order sampler, and posterior guidance by data
// consistency (DC) and reconstruction guidance (RG).

#include "cqtdiff/degrade.hpp"
#include "cqtdiff/denoiser.hpp"
#include "cqtdiff/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cqtdiff {

struct NoiseSchedule {
    double sigma_min = 1e-4;
    double sigma_max = 1.0;
    double rho = 13.0;
    int steps = 35;

    static NoiseSchedule sampling(int steps = 35) { return {1e-4, 1.0, 13.0, steps}; }
    static NoiseSchedule training() { return {1e-6, 10.0, 10.0, 2}; }

    void validate() const {
        require(sigma_min > 0.0 && std::isfinite(sigma_max), "schedule: sigma bounds must be positive and finite");
        require(sigma_min < sigma_max, "schedule: sigma_min must be below sigma_max");
        require(rho > 0.0, "schedule: rho must be positive");
        require(steps >= 2, "schedule: at least two steps required");
    }

    /// Noise level at the continuous index u in [0, 1]; u=0 gives sigma_max.
    double sigma_at(double u) const {
        if (u <= 0.0) return sigma_max;
        if (u >= 1.0) return sigma_min;
        const double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
        return std::pow(a + u * (b - a), rho);
    }

    /// t_0 .. t_{T-1} followed by the terminal t_T = 0.
    std::vector<double> times() const {
        validate();
        std::vector<double> t(static_cast<std::size_t>(steps) + 1);
        for (int i = 0; i < steps; ++i) t[static_cast<std::size_t>(i)] = sigma_at(double(i) / double(steps - 1));
        t.front() = sigma_max;
        t[static_cast<std::size_t>(steps) - 1] = sigma_min;
        t.back() = 0.0;
        return t;
    }

    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

inline std::vector<double> perturb(std::span<const double> x0, double sigma, std::span<const double> eps) {
    if (!(sigma >= 0.0)) throw UsageError("perturb: sigma must be nonnegative");
    if (x0.size() != eps.size()) throw UsageError("perturb: length mismatch");
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = x0[i] + sigma * eps[i];
    return out;
}

/// s(x, sigma) = (D - x) / sigma^2.
inline std::vector<double> score_from_denoised(std::span<const double> x_t, std::span<const double> denoised, double sigma) {
    if (!(sigma > 0.0)) throw UsageError("score: sigma must be positive");
    if (x_t.size() != denoised.size()) throw UsageError("score: length mismatch");
    std::vector<double> s(x_t.size());
    const double inv = 1.0 / (sigma * sigma);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (denoised[i] - x_t[i]) * inv;
    return s;
}

/// Streaming standard deviation over all samples of all segments.
class SigmaDataEstimator {
public:
    void add(std::span<const double> x) {
        for (double v : x) {
            ++n_;
            const double d = v - mean_;
            mean_ += d / double(n_);
            m2_ += d * (v - mean_);
        }
    }
    std::size_t count() const { return n_; }
    SigmaData finish() const {
        if (n_ == 0) throw UsageError("estimate_sigma_data: empty corpus");
        return SigmaData(std::sqrt(m2_ / double(n_)));
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

template <class Range>
SigmaData estimate_sigma_data(const Range& corpus) {
    SigmaDataEstimator est;
    for (const auto& seg : corpus) est.add(std::span<const double>(seg));
    return est.finish();
}

// ---------------------------------------------------------------------------
// Denoising models as seen by the sampler.

struct GuidedEval {
    std::vector<double> denoised;
    std::vector<double> gradient;  // d/dx |y - A(D(x))|^2
};

class DenoisingModel {
public:
    virtual ~DenoisingModel() = default;
    virtual std::size_t signal_len() const = 0;
    virtual std::vector<double> denoise(std::span<const double> x, double sigma) const = 0;
    virtual GuidedEval denoise_guided(std::span<const double> x, double sigma, const Degradation& A,
                                      std::span<const double> y) const = 0;
};

namespace detail {

// seed for D in the misfit gradient: -2 J_A(D)^T (y - A(D))
inline std::vector<double> misfit_seed(const Degradation& A, std::span<const double> d, std::span<const double> y) {
    auto ad = A.apply(d);
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] = y[i] - ad[i];
    auto g = A.vjp(d, ad);
    for (auto& v : g) v *= -2.0;
    return g;
}

}  // namespace detail

/// Trained network D_theta.
template <class T>
class NetworkModel final : public DenoisingModel {
public:
    NetworkModel(const Denoiser<T>& den, const grad::ParamStore<T>& params) : den_(den), params_(params) {}

    std::size_t signal_len() const override { return den_.signal_len(); }

    std::vector<double> denoise(std::span<const double> x, double sigma) const override { return den_.denoise(x, sigma, params_); }

    GuidedEval denoise_guided(std::span<const double> x, double sigma, const Degradation& A,
                              std::span<const double> y) const override {
        grad::Tape<T> tape;
        auto xv = tape.leaf(Denoiser<T>::to_tensor(x));
        auto d = den_.denoise(tape, xv, sigma, params_);
        GuidedEval out;
        out.denoised.assign(d.value().data.begin(), d.value().data.end());
        const auto seed = detail::misfit_seed(A, out.denoised, y);
        auto grads = tape.backward(d, Denoiser<T>::to_tensor(seed));
        const auto& g = grads.wrt(xv);
        out.gradient.assign(g.data.begin(), g.data.end());
        return out;
    }

private:
    const Denoiser<T>& den_;
    const grad::ParamStore<T>& params_;
};

/// Exact denoiser of a zero-mean Gaussian prior with standard deviation
/// sigma_data, D = c_skip(sigma) x. Equal to a network whose output layer is zero.
class GaussianPriorModel final : public DenoisingModel {
public:
    GaussianPriorModel(std::size_t n, double sigma_data) : n_(n), pc_{SigmaData(sigma_data).value()} {}

    std::size_t signal_len() const override { return n_; }

    std::vector<double> denoise(std::span<const double> x, double sigma) const override {
        const double c = pc_.c_skip(sigma);
        std::vector<double> d(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) d[i] = c * x[i];
        return d;
    }

    GuidedEval denoise_guided(std::span<const double> x, double sigma, const Degradation& A,
                              std::span<const double> y) const override {
        GuidedEval out;
        out.denoised = denoise(x, sigma);
        out.gradient = detail::misfit_seed(A, out.denoised, y);
        const double c = pc_.c_skip(sigma);
        for (auto& v : out.gradient) v *= c;
        return out;
    }

private:
    std::size_t n_;
    Preconditioning pc_;
};

// ---------------------------------------------------------------------------
// Training objective.

struct LossItem {
    double sigma;
    double loss;
};

template <class T>
struct LossResult {
    double loss = 0.0;  // batch mean
    std::vector<LossItem> items;
    std::map<std::string, grad::Tensor<T>> grads;
};

/// lambda(sigma) |d - x|^2 / N for one item.
inline double denoising_loss(const Preconditioning& pc, double sigma, std::span<const double> x, std::span<const double> d) {
    if (x.size() != d.size() || x.empty()) throw UsageError("denoising_loss: length mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += (d[i] - x[i]) * (d[i] - x[i]);
    return pc.loss_weight(sigma) * sq / double(x.size());
}

/// Mean over the batch of lambda(sigma) |D(x + sigma eps, sigma) - x|^2 / N,
/// with gradients for every trainable parameter.
template <class T>
LossResult<T> training_loss(const Denoiser<T>& den, const grad::ParamStore<T>& params, const std::vector<std::vector<double>>& batch,
                            std::span<const double> sigmas, const std::vector<std::vector<double>>& noises) {
    if (batch.empty()) throw UsageError("training_loss: empty batch");
    if (sigmas.size() != batch.size() || noises.size() != batch.size()) throw UsageError("training_loss: batch size mismatch");
    const Preconditioning pc = den.preconditioning();
    const double B = double(batch.size());
    LossResult<T> out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& x = batch[b];
        const double N = double(x.size());
        const double sigma = sigmas[b];
        const auto xt = perturb(x, sigma, noises[b]);
        grad::Tape<T> tape;
        auto d = den.denoise(tape, tape.constant(Denoiser<T>::to_tensor(xt)), sigma, params);
        auto err = grad::sub(d, tape.constant(Denoiser<T>::to_tensor(x)));
        double sq = 0.0;
        for (auto v : err.value().data) sq += double(v) * double(v);
        const double w = pc.loss_weight(sigma);
        const double item = w * sq / N;
        if (!std::isfinite(item)) throw NumericalError("training_loss: non-finite loss at sigma=" + std::to_string(sigma));
        out.items.push_back({sigma, item});
        out.loss += item / B;
        grad::Tensor<T> seed(err.shape());
        for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = static_cast<T>(2.0 * w / (N * B) * double(err.value()[i]));
        auto g = tape.backward(err, seed);
        for (auto& [name, t] : g.params) {
            if (auto it = out.grads.find(name); it != out.grads.end())
                grad::axpy(T(1), t, it->second);
            else
                out.grads.emplace(name, std::move(t));
        }
    }
    return out;
}

/// Draws sigma (continuous index on the training schedule) and noise for
/// each item, evaluates the loss and applies one Adam update.
template <class T>
LossResult<T> train_step(const Denoiser<T>& den, grad::ParamStore<T>& params, const std::vector<std::vector<double>>& batch,
                         const NoiseSchedule& train_schedule, CounterRng& rng, const grad::AdamConfig& adam = {}) {
    std::vector<double> sigmas(batch.size());
    std::vector<std::vector<double>> noises(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        sigmas[b] = train_schedule.sigma_at(rng.uniform());
        noises[b].resize(batch[b].size());
        for (auto& v : noises[b]) v = rng.normal();
    }
    auto res = training_loss(den, params, batch, sigmas, noises);
    for (const auto& [name, g] : res.grads)
        for (auto v : g.data)
            if (!std::isfinite(double(v))) throw NumericalError("train_step: non-finite gradient in " + name);
    grad::adam_step(params, res.grads, adam);
    return res;
}

// ---------------------------------------------------------------------------
// Sampling.

struct SamplerConfig {
    NoiseSchedule schedule = NoiseSchedule::sampling();
    double s_churn = 5.0;
    double s_noise = 1.0;
    double s_tmin = 0.0;
    double s_tmax = std::numeric_limits<double>::infinity();
    std::uint64_t seed = 0;

    void validate() const {
        schedule.validate();
        require(s_churn >= 0.0, "sampler: s_churn must be nonnegative");
        require(s_noise > 0.0, "sampler: s_noise must be positive");
    }
};

enum class GuidanceMode { none, dc, rg, dc_rg };

enum class XiScaling {
    squared_norm,  // xi = xi' sqrt(N) / (t |G|^2)
    norm,          // xi = xi' sqrt(N) / (t |G|)
};

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::none;
    double xi_prime = 0.0;
    XiScaling scaling = XiScaling::squared_norm;
    std::optional<DegradationSpec> degradation;
    std::vector<double> observations;
    // Project the final sample onto the observations (DC modes only).
    bool final_projection = true;
};

inline bool uses_dc(GuidanceMode m) { return m == GuidanceMode::dc || m == GuidanceMode::dc_rg; }
inline bool uses_rg(GuidanceMode m) { return m == GuidanceMode::rg || m == GuidanceMode::dc_rg; }

inline std::string to_string(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::none: return "none";
        case GuidanceMode::dc: return "dc";
        case GuidanceMode::rg: return "rg";
        case GuidanceMode::dc_rg: return "dc+rg";
    }
    return "?";
}

inline GuidanceMode parse_guidance_mode(const std::string& s) {
    if (s == "none") return GuidanceMode::none;
    if (s == "dc") return GuidanceMode::dc;
    if (s == "rg") return GuidanceMode::rg;
    if (s == "dc+rg" || s == "dc_rg") return GuidanceMode::dc_rg;
    throw UsageError("unknown guidance mode '" + s + "' (none, dc, rg, dc+rg)");
}

/// xi(t) G, or zeros when G vanishes.
inline std::vector<double> rg_term(std::span<const double> G, double t, double xi_prime, XiScaling scaling) {
    if (!(t > 0.0)) throw UsageError("rg: t must be positive");
    std::vector<double> out(G.size(), 0.0);
    const double gn = norm2(G);
    if (!std::isfinite(gn)) throw NumericalError("rg: non-finite guidance gradient");
    if (gn == 0.0) return out;
    const double denom = scaling == XiScaling::squared_norm ? gn * gn : gn;
    const double xi = xi_prime * std::sqrt(double(G.size())) / (t * denom);
    for (std::size_t i = 0; i < G.size(); ++i) out[i] = xi * G[i];
    return out;
}

/// Iterates the stochastic Heun sampler. Noise for step i comes from the
/// counter stream (seed, i + 1); the initial draw uses stream 0.
class Sampler {
public:
    Sampler(const DenoisingModel& model, SamplerConfig cfg, GuidanceConfig guidance = {}, double fs = kDefaultSampleRate)
        : model_(model), cfg_(std::move(cfg)), guide_(std::move(guidance)), fs_(fs) {
        cfg_.validate();
        const std::size_t n = model_.signal_len();
        if (guide_.mode != GuidanceMode::none) {
            if (!guide_.degradation) throw UsageError("sampler: guidance requires a degradation");
            if (guide_.observations.size() != n)
                throw UsageError("sampler: observations have length " + std::to_string(guide_.observations.size()) + ", expected " +
                                 std::to_string(n));
            require(guide_.xi_prime >= 0.0, "sampler: xi' must be nonnegative");
            op_.emplace(*guide_.degradation, n, fs_);
            if (uses_dc(guide_.mode) && !op_->supports_data_consistency())
                throw UsageError("data consistency unavailable for nonlinear degradation");
        }
    }

    std::vector<double> run() const {
        const auto t = cfg_.schedule.times();
        const std::size_t n = model_.signal_len();
        const int T = cfg_.schedule.steps;
        std::vector<double> x(n);
        {
            CounterRng rng(cfg_.seed, 0, 0);
            for (auto& v : x) v = t[0] * rng.normal();
        }
        const double gamma_max = std::min(cfg_.s_churn / T, std::sqrt(2.0) - 1.0);
        std::vector<double> x_hat(n), x_next(n);
        for (int i = 0; i < T; ++i) {
            const double ti = t[static_cast<std::size_t>(i)], tn = t[static_cast<std::size_t>(i) + 1];
            const double gamma = (ti >= cfg_.s_tmin && ti <= cfg_.s_tmax) ? gamma_max : 0.0;
            const double th = ti + gamma * ti;
            if (gamma > 0.0) {
                CounterRng rng(cfg_.seed, static_cast<std::uint64_t>(i) + 1, 0);
                const double s = std::sqrt(th * th - ti * ti) * cfg_.s_noise;
                for (std::size_t k = 0; k < n; ++k) x_hat[k] = x[k] + s * rng.normal();
            } else {
                x_hat = x;
            }
            const auto d = direction(x_hat, th, i);
            for (std::size_t k = 0; k < n; ++k) x_next[k] = x_hat[k] + (tn - th) * d[k];
            if (tn > 0.0) {
                const auto d2 = direction(x_next, tn, i);
                for (std::size_t k = 0; k < n; ++k) x_next[k] = x_hat[k] + (tn - th) * 0.5 * (d[k] + d2[k]);
            }
            if (!all_finite(x_next)) throw NumericalError("sampler: non-finite state at step " + std::to_string(i));
            x.swap(x_next);
        }
        if (op_ && uses_dc(guide_.mode) && guide_.final_projection) x = op_->data_consistency(x, guide_.observations);
        return x;
    }

    /// dx/dt = (x - D')/t + t xi G, where D' is the (possibly DC-replaced)
    /// clean estimate; equals -t times the guided score.
    std::vector<double> direction(std::span<const double> x, double t, int step) const {
        std::vector<double> x0;
        std::vector<double> guidance;
        if (op_ && uses_rg(guide_.mode)) {
            auto ev = model_.denoise_guided(x, t, *op_, guide_.observations);
            x0 = std::move(ev.denoised);
            guidance = rg_term(ev.gradient, t, guide_.xi_prime, guide_.scaling);
        } else {
            x0 = model_.denoise(x, t);
        }
        if (!all_finite(x0)) throw NumericalError("sampler: non-finite denoiser output at step " + std::to_string(step));
        if (op_ && uses_dc(guide_.mode)) x0 = op_->data_consistency(x0, guide_.observations);
        std::vector<double> d(x.size());
        for (std::size_t k = 0; k < d.size(); ++k) d[k] = (x[k] - x0[k]) / t;
        if (!guidance.empty())
            for (std::size_t k = 0; k < d.size(); ++k) d[k] += t * guidance[k];
        return d;
    }

private:
    const DenoisingModel& model_;
    SamplerConfig cfg_;
    GuidanceConfig guide_;
    double fs_;
    std::optional<Degradation> op_;
};

inline std::vector<double> sample(const DenoisingModel& model, const SamplerConfig& cfg, const GuidanceConfig& guidance = {},
                                  double fs = kDefaultSampleRate) {
    return Sampler(model, cfg, guidance, fs).run();
}

}  // namespace cqtdiff
