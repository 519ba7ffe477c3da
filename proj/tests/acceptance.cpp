// Acceptance run: one PASS/FAIL line per criterion. Criteria 5 to 8 need a
// trained checkpoint and its loss log (artifacts/toy by default).

#include "cqtdiff/app/commands.hpp"
#include "cqtdiff/app/corpus.hpp"
#include "cqtdiff/fft.hpp"
#include "fd_check.hpp"
#include "oracles/oracles.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace cqtdiff;
using namespace cqtdiff::app;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string summary;
};

void note(const std::string& s) { std::cout << "    " << s << "\n" << std::flush; }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Held-out items: the toy run trains on indices 0..1999 of the same generator.
constexpr std::size_t kHeldOut = 2000;
constexpr std::size_t kDevSplit = 2100;

CorpusSpec toy_corpus(std::size_t samples) {
    CorpusSpec c;
    c.samples = samples;
    return c;
}

// ---------------------------------------------------------------------------
// 1

Outcome cqt_reconstruction() {
    const auto t0 = std::chrono::steady_clock::now();
    CqtConfig c;
    c.bins_per_octave = 64;
    c.octaves = 7;
    const auto plan = build_plan(c, 65536);
    double worst = 1e300;
    for (std::uint64_t k = 0; k < 1000; ++k) {
        const auto x = randn(65536, 1'000'000 + k);
        const auto y = inverse(plan, forward(plan, std::span<const double>(x)));
        worst = std::min(worst, snr_db(x, y));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst >= 80.0 && secs <= 300.0, fmt("min SNR %.1f dB over 1000 signals (64x7, 2^16), %.0f s", worst, secs)};
}

// ---------------------------------------------------------------------------
// 2

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.cqt.bins_per_octave = 4;
    c.cqt.octaves = 4;
    c.depth = 2;
    c.base_channels = 4;
    c.dilations = {1, 2};
    c.rff_features = 4;
    c.embed_dim = 8;
    c.positional_channels = 2;
    return c;
}

double degradation_fd(const DegradationSpec& spec, std::size_t n, std::uint64_t seed) {
    const Degradation A(spec, n, kDefaultSampleRate);
    auto x = randn(n, seed, 0.5);
    if (const auto* c = std::get_if<Clip>(&spec))
        for (auto& v : x)
            if (std::abs(std::abs(v) - c->threshold) < 1e-3) v += 1e-2;
    const auto s = randn(n, seed + 1), dir = randn(n, seed + 2);
    const auto g = A.vjp(x, s);
    const double h = 1e-6;
    auto xp = x, xm = x;
    for (std::size_t i = 0; i < n; ++i) {
        xp[i] += h * dir[i];
        xm[i] -= h * dir[i];
    }
    const double fd = (dot(s, A.apply(xp)) - dot(s, A.apply(xm))) / (2 * h);
    return rel_err(fd, dot(g, dir));
}

Outcome gradient_suite() {
    using namespace cqtdiff::grad;
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, double> worst;
    auto track = [&](const std::string& k, double e) { worst[k] = std::max(worst[k], e); };

    for (std::uint64_t c = 0; c < 10; ++c) {
        Dims d(c);
        const Shape s{d.pick(1, 4), d.pick(1, 5), d.pick(1, 6)};
        const auto a = randt(s, 10 + c), b = randt(s, 20 + c);
        track("add", fd_check([](auto&, const auto& v) { return add(v[0], v[1]); }, {a, b}, c));
        track("sub", fd_check([](auto&, const auto& v) { return sub(v[0], v[1]); }, {a, b}, c));
        track("mul", fd_check([](auto&, const auto& v) { return mul(v[0], v[1]); }, {a, b}, c));
        track("scale", fd_check([](auto&, const auto& v) { return scale(v[0], -1.7); }, {a}, c));
        track("gelu", fd_check([](auto&, const auto& v) { return gelu(v[0]); }, {randt(s, 30 + c, 2.0)}, c));
        track("sum_squares", fd_check([](auto&, const auto& v) { return sum_squares(v[0]); }, {a}, c));
        auto x = randt(s, 40 + c);
        for (auto& v : x.data)
            if (std::abs(std::abs(v) - 0.5) < 1e-3) v += 0.01;
        track("clip", fd_check([](auto&, const auto& v) { return clip(v[0], 0.5); }, {x}, c));

        const std::size_t m = d.pick(1, 6), k = d.pick(1, 7), n = d.pick(1, 5);
        track("matmul", fd_check([](auto&, const auto& v) { return matmul(v[0], v[1]); }, {randt({m, k}, c), randt({k, n}, c + 1)}, c));
        track("linear", fd_check([](auto&, const auto& v) { return linear(v[0], v[1], v[2]); },
                                 {randt({k}, c + 2), randt({m, k}, c + 3), randt({m}, c + 4)}, c));

        const std::size_t C = d.pick(1, 3), F = d.pick(1, 9), T = 2 * d.pick(1, 6);
        const std::size_t Cout = d.pick(1, 3), K = 2 * d.pick(0, 2) + 1;
        const int dil = static_cast<int>(d.pick(1, 4));
        const auto sp = randt({C, F, T}, c);
        track("conv1d_freq", fd_check([dil](auto&, const auto& v) { return conv1d_freq(v[0], v[1], dil); }, {sp, randt({Cout, C, K}, c + 1)}, c));
        track("film", fd_check([](auto&, const auto& v) { return film(v[0], v[1], v[2]); }, {sp, randt({C}, c + 2), randt({C}, c + 3)}, c));
        track("concat", fd_check([](auto&, const auto& v) { return concat_channels<double>({v[0], v[1]}); }, {sp, randt({Cout, F, T}, c + 4)}, c));
        track("complex_unpack", fd_check([](auto&, const auto& v) { return complex_unpack(v[0]); }, {randt({F, T, 2}, c + 5)}, c));
        track("complex_pack", fd_check([](auto&, const auto& v) { return complex_pack(v[0]); }, {randt({2, F, T}, c + 6)}, c));
        track("downsample", fd_check([](auto&, const auto& v) { return downsample_time(v[0]); }, {sp}, c));
        track("upsample", fd_check([](auto&, const auto& v) { return upsample_time(v[0]); }, {sp}, c));

        CqtConfig cc;
        cc.bins_per_octave = static_cast<int>(d.pick(1, 4));
        cc.octaves = static_cast<int>(d.pick(1, 3));
        const std::size_t L = std::size_t{64} << d.pick(0, 3);
        const auto plan = build_plan(cc, L);
        track("cqt_forward", fd_check([&plan](auto&, const auto& v) { return cqt_forward(v[0], plan); }, {randt({L}, c)}, c));
        track("cqt_inverse", fd_check([&plan](auto&, const auto& v) { return cqt_inverse(v[0], plan); },
                                      {randt({plan.band_count(), plan.frames, 2}, c)}, c));

        track("lowpass", degradation_fd(Lowpass{1000.0, 64, 8.0}, 512, 50 + c));
        track("mask", degradation_fd(Mask{0.002, 0.01}, 512, 60 + c));
        track("clip_operator", degradation_fd(Clip{0.3}, 512, 70 + c));
    }

    // denoiser parameters and input, and the RG gradient through clip o denoiser
    constexpr std::size_t n = 1024;
    Denoiser<double> den(tiny_config(), n, SigmaData(0.5));
    const auto params = den.init_params(5, false);
    NetworkModel<double> net(den, params);
    const Degradation A(Clip{0.1}, n, kDefaultSampleRate);
    const auto y = A.apply(randn(n, 90, 0.4));
    for (int trial = 0; trial < 3; ++trial) {
        const double sigma = std::pow(10.0, -2.0 + trial);
        const auto x = randn(n, 100 + trial, 0.4);
        const auto ev = net.denoise_guided(x, sigma, A, y);
        auto misfit = [&](const std::vector<double>& xx, const ParamStore<double>& p) {
            const auto r = A.apply(den.denoise(xx, sigma, p));
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += (y[i] - r[i]) * (y[i] - r[i]);
            return s;
        };
        const double h = 1e-7;
        for (int k = 0; k < 3; ++k) {
            const auto dir = randn(n, 200 + 10 * trial + k);
            auto xp = x, xm = x;
            for (std::size_t i = 0; i < n; ++i) {
                xp[i] += h * dir[i];
                xm[i] -= h * dir[i];
            }
            track("rg_clip_denoiser", rel_err((misfit(xp, params) - misfit(xm, params)) / (2 * h), dot(ev.gradient, dir)));
        }

        Tape<double> tape;
        auto xv = tape.leaf(Tensor<double>({n}, x));
        auto dv = den.denoise(tape, xv, sigma, params);
        const std::vector<double> dval(dv.value().data.begin(), dv.value().data.end());
        auto g = tape.backward(dv, Tensor<double>({n}, cqtdiff::detail::misfit_seed(A, dval, y)));
        for (const auto& [name, e] : params.entries()) {
            if (!e.trainable) continue;
            const auto pd = randt(e.value.shape, 300 + trial);
            auto pp = params, pm = params;
            axpy(1e-6, pd, pp.get_mutable(name));
            axpy(-1e-6, pd, pm.get_mutable(name));
            const double fd = (misfit(x, pp) - misfit(x, pm)) / 2e-6;
            double an = 0;
            for (std::size_t i = 0; i < pd.size(); ++i) an += g.params.at(name)[i] * pd[i];
            if (std::abs(fd) > 1e-9 || std::abs(an) > 1e-9) track("denoiser_params", rel_err(fd, an));
        }
    }

    double overall = 0;
    std::string worst_name;
    for (const auto& [k, v] : worst) {
        if (v > overall) worst_name = k;
        overall = std::max(overall, v);
    }
    for (const auto& [k, v] : worst) note(fmt("%-18s %.2e", k.c_str(), v));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {overall <= 1e-4 && secs <= 600.0,
            fmt("worst relative error %.2e (%s) over %zu operator groups", overall, worst_name.c_str(), worst.size())};
}

// ---------------------------------------------------------------------------
// 3

Outcome schedule_exactness() {
    const NoiseSchedule s{1e-4, 1.0, 13.0, 35};
    const auto t = s.times();
    double worst = 0;
    for (std::size_t i = 0; i < 35; ++i) worst = std::max(worst, rel_err(t[i], oracle::kSchedule_1e4_1_13_35[i]));
    const bool ends = t.size() == 36 && t[0] == 1.0 && t[34] == 1e-4 && t[35] == 0.0;
    return {worst <= 1e-12 && ends, fmt("max relative error %.2e, endpoints %s", worst, ends ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 4

double ks_normal_pvalue(std::vector<double> v, double s) {
    std::sort(v.begin(), v.end());
    const double n = double(v.size());
    double d = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double F = 0.5 * std::erfc(-v[i] / (s * std::sqrt(2.0)));
        d = std::max({d, F - double(i) / n, double(i + 1) / n - F});
    }
    const double lam = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    double q = 0;
    for (int k = 1; k < 100; ++k) q += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
    return std::clamp(q, 0.0, 1.0);
}

Outcome gaussian_oracle() {
    const double sd = 0.5;
    // the zero-initialized network is the analytic prior
    DenoiserConfig dc = tiny_config();
    Denoiser<double> den(dc, 256, SigmaData(sd));
    const auto p0 = den.init_params(1);
    NetworkModel<double> net(den, p0);
    GaussianPriorModel gauss(256, sd);
    SamplerConfig cfg;
    cfg.s_churn = 0;
    cfg.seed = 3;
    const bool same = sample(net, cfg) == sample(gauss, cfg);

    GaussianPriorModel g64(64, sd);
    std::vector<double> pool;
    for (std::uint64_t seed = 0; pool.size() < 10000; ++seed) {
        cfg.seed = seed;
        const auto x = sample(g64, cfg);
        pool.insert(pool.end(), x.begin(), x.end());
    }
    pool.resize(10000);
    const double p = ks_normal_pvalue(pool, sd / std::sqrt(1.0 + sd * sd));

    // probability-flow ODE: x(t) = x(T) sqrt(t^2 + sd^2) / sqrt(T^2 + sd^2)
    std::vector<double> exact(64);
    {
        CounterRng rng(11, 0, 0);
        for (auto& v : exact) v = rng.normal() * sd / std::sqrt(1.0 + sd * sd);
    }
    std::vector<double> err;
    for (int T : {10, 20, 40}) {
        cfg.seed = 11;
        cfg.schedule.steps = T;
        const auto x = sample(g64, cfg);
        double m = 0;
        for (std::size_t i = 0; i < 64; ++i) m = std::max(m, std::abs(x[i] - exact[i]));
        err.push_back(m);
    }
    const double r1 = err[0] / err[1], r2 = err[1] / err[2];
    const bool ok = same && p > 0.01 && r1 >= 3 && r1 <= 5 && r2 >= 3 && r2 <= 5;
    return {ok, fmt("zero net == prior: %s, KS p = %.3f, error ratios %.2f %.2f", same ? "yes" : "no", p, r1, r2)};
}

// ---------------------------------------------------------------------------
// 5

// Spectral peaks of a Hann-windowed, 4x zero-padded FFT: local maxima at most
// 50 dB below the strongest bin and 15 dB above the median of +-200 Hz around
// them, refined by parabolic interpolation on log power. Strongest 12 kept.
std::vector<double> spectral_peaks(std::span<const double> x, double fs) {
    const std::size_t n = x.size(), N = 4 * next_pow2(n);
    std::vector<double> w(N, 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i] = x[i] * 0.5 * (1.0 - std::cos(2.0 * kPi * double(i) / double(n)));
    std::vector<cplx> X(N / 2 + 1);
    fft::real_forward(w, X);
    std::vector<double> P(X.size());
    for (std::size_t k = 0; k < X.size(); ++k) P[k] = std::norm(X[k]) + 1e-300;
    const double pmax = *std::max_element(P.begin(), P.end());
    const double df = fs / double(N);
    const auto half = static_cast<std::size_t>(200.0 / df);
    std::vector<std::pair<double, double>> found;  // (power, frequency)
    for (std::size_t k = 2; k + 2 < P.size(); ++k) {
        const double f = double(k) * df;
        if (f < 50.0 || f > 0.45 * fs) continue;
        if (!(P[k] > P[k - 1] && P[k] >= P[k + 1]) || P[k] < pmax * 1e-5) continue;
        std::vector<double> around(P.begin() + static_cast<std::ptrdiff_t>(k > half ? k - half : 0),
                                   P.begin() + static_cast<std::ptrdiff_t>(std::min(P.size(), k + half + 1)));
        std::nth_element(around.begin(), around.begin() + around.size() / 2, around.end());
        if (P[k] < std::pow(10.0, 1.5) * around[around.size() / 2]) continue;
        const double a = std::log(P[k - 1]), b = std::log(P[k]), c = std::log(P[k + 1]);
        const double off = 0.5 * (a - c) / (a - 2 * b + c);
        found.push_back({P[k], (double(k) + off) * df});
    }
    std::sort(found.begin(), found.end(), std::greater<>());
    if (found.size() > 12) found.resize(12);
    std::vector<double> f;
    for (const auto& [p, fr] : found) f.push_back(fr);
    return f;
}

// Largest number of peaks at integer multiples (+-2%) of some peak.
int harmonic_partials(const std::vector<double>& peaks) {
    int best = 0;
    for (double f0 : peaks) {
        int count = 0;
        for (int h = 1; h <= 40; ++h) {
            const double target = h * f0;
            const bool hit = std::any_of(peaks.begin(), peaks.end(), [&](double f) { return std::abs(f - target) <= 0.02 * target; });
            count += hit;
        }
        best = std::max(best, count);
    }
    return best;
}

bool has_harmonic_stack(std::span<const double> x, double fs) { return harmonic_partials(spectral_peaks(x, fs)) >= 3; }

struct LossLog {
    std::vector<std::size_t> step;
    std::vector<double> loss;
};

LossLog read_loss_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open loss log '" + path + "'");
    LossLog log;
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::size_t step;
        double wall, loss;
        if (ss >> step >> wall >> loss) {
            log.step.push_back(step);
            log.loss.push_back(loss);
        }
    }
    return log;
}

Outcome toy_training(const std::string& ckpt_path, const std::string& log_path, std::size_t samples) {
    if (!fs::exists(ckpt_path) || !fs::exists(log_path)) return {false, "no trained checkpoint or loss log at " + ckpt_path};
    const auto log = read_loss_log(log_path);
    if (log.step.empty()) return {false, "empty loss log"};
    // each row averages the steps since the previous row
    double early = 0;
    std::size_t ne = 0;
    for (std::size_t i = 0; i < log.step.size() && log.step[i] <= 100; ++i, ++ne) early += log.loss[i];
    if (ne == 0) return {false, "loss log has no rows before step 100"};
    early /= double(ne);
    // lowest 1000-step running mean within 20k steps
    const std::size_t win = std::max<std::size_t>(1, 1000 / std::max<std::size_t>(1, log.step[0]));
    double best = 1e300, last = 0;
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + win <= log.step.size() && log.step[i + win - 1] <= 20000; ++i) {
        double m = 0;
        for (std::size_t j = i; j < i + win; ++j) m += log.loss[j];
        m /= double(win);
        last = m;
        if (m < best) {
            best = m;
            best_at = log.step[i + win - 1];
        }
    }
    const double drop = 1.0 - best / early;
    note(fmt("loss: step<=100 mean %.4f, best 1000-step mean %.4f at step %zu, last %.4f, logged through step %zu", early, best, best_at, last,
             log.step.back()));

    // detector sanity on references
    const double fs = kDefaultSampleRate;
    const auto spec = toy_corpus(4096);
    int corpus_hits = 0, noise_hits = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        corpus_hits += has_harmonic_stack(synth_item(spec, kHeldOut + i), fs);
        noise_hits += has_harmonic_stack(randn(4096, 5000 + i), fs);
    }
    note(fmt("detector: %d/50 held-out corpus items, %d/50 white-noise signals", corpus_hits, noise_hits));

    const auto ck = load_checkpoint(ckpt_path);
    LoadedModel<float> lm(ck, ck.segment_len);
    const auto model = lm.model();
    int hits = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        SamplerConfig sc;
        sc.seed = i;
        hits += has_harmonic_stack(sample(model, sc, {}, fs), fs);
    }
    const double rate = double(hits) / double(samples);
    const bool ok = drop >= 0.5 && rate >= 0.5;
    return {ok, fmt("loss drop %.1f%% (need >= 50%%), harmonic stacks in %d/%zu samples (need >= 50%%), checkpoint step %llu", 100.0 * drop,
                    hits, samples, static_cast<unsigned long long>(ck.train_step))};
}

// ---------------------------------------------------------------------------
// 6

double energy_below(std::span<const double> x, double fs, double f) {
    std::vector<cplx> X(x.size() / 2 + 1);
    fft::real_forward(x, X);
    double lo = 0, all = 0;
    for (std::size_t k = 0; k < X.size(); ++k) {
        all += std::norm(X[k]);
        if (double(k) * fs / double(x.size()) < f) lo += std::norm(X[k]);
    }
    return lo / all;
}

Outcome bwe_consistency(const Checkpoint& ck) {
    const double fs = ck.model.cqt.sample_rate_hz;
    const auto spec = toy_corpus(ck.segment_len);
    // first held-out item with at least half its energy below the cutoff
    std::size_t idx = kHeldOut;
    while (energy_below(synth_item(spec, idx), fs, 1000.0) < 0.5) ++idx;
    const auto clean = synth_item(spec, idx);
    RestoreOptions o;
    o.task = Task::bwe;
    o.cutoff_hz = 1000.0;
    o.mode = GuidanceMode::dc;
    o.simulate = true;
    o.seed = 1;
    const auto r = restore_signal(ck, clean, o);
    const Degradation A(Lowpass{1000.0, 500, 8.0}, clean.size(), fs);
    const auto lp = A.apply(r.restored);
    std::vector<double> diff(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) diff[i] = lp[i] - r.observed[i];
    const double cons = norm2(diff) / norm2(r.observed);
    const double lsd_out = lsd(clean, r.restored), lsd_in = lsd(clean, r.observed);
    return {cons <= 1e-3 && lsd_out < lsd_in, fmt("item %zu: |LPF(x) - y|/|y| = %.2e, LSD %.3f vs lowpassed input %.3f", idx, cons, lsd_out, lsd_in)};
}

// ---------------------------------------------------------------------------
// 7

Outcome inpainting(const Checkpoint& ck, std::size_t items) {
    const double fs = ck.model.cqt.sample_rate_hz;
    const auto spec = toy_corpus(16384);
    const Mask m{0.12, 0.62};
    int wins = 0;
    bool exact = true;
    for (std::size_t i = 0; i < items; ++i) {
        const auto clean = synth_item(spec, kHeldOut + i);
        const auto [a, b] = mask_range(m, clean.size(), fs);
        RestoreOptions o;
        o.task = Task::inpaint;
        o.gap_start_s = m.t_start;
        o.gap_end_s = m.t_end;
        o.simulate = true;
        o.seed = i;
        auto jump = [&](const std::vector<double>& x) { return std::max(std::abs(x[a] - x[a - 1]), std::abs(x[b] - x[b - 1])); };
        o.mode = GuidanceMode::dc_rg;
        o.xi_prime = 0.35;
        const auto rg = restore_signal(ck, clean, o);
        o.mode = GuidanceMode::dc;
        const auto dc = restore_signal(ck, clean, o);
        for (std::size_t k = 0; k < clean.size(); ++k)
            if ((k < a || k >= b) && (rg.restored[k] != clean[k] || dc.restored[k] != clean[k])) exact = false;
        const double jr = jump(rg.restored), jd = jump(dc.restored);
        wins += jr < jd;
        note(fmt("item %zu: jump dc+rg %.4f, dc %.4f, clean %.4f", kHeldOut + i, jr, jd, jump(clean)));
    }
    const double rate = double(wins) / double(items);
    return {exact && rate >= 0.7, fmt("context bit-exact: %s, RG lowers the boundary jump on %d/%zu items (need >= 70%%)", exact ? "yes" : "no", wins,
                                      items)};
}

// ---------------------------------------------------------------------------
// 8

struct DeclipScore {
    int improved = 0;
    double mean_gain_db = 0;
};

DeclipScore declip_run(const Checkpoint& ck, std::size_t first, std::size_t items, double xi, bool verbose) {
    const auto spec = toy_corpus(ck.segment_len);
    DeclipScore s;
    for (std::size_t i = 0; i < items; ++i) {
        const auto clean = synth_item(spec, first + i);
        RestoreOptions o;
        o.task = Task::declip;
        o.clip_sdr_db = 1.0;
        o.simulate = true;
        o.mode = GuidanceMode::rg;
        o.xi_prime = xi;
        o.steps = 140;
        o.seed = i;
        const auto r = restore_signal(ck, clean, o);
        const double before = sdr(clean, r.observed), after = sdr(clean, r.restored);
        s.improved += after > before;
        s.mean_gain_db += (after - before) / double(items);
        if (verbose) note(fmt("item %zu: SDR clipped %.2f dB, restored %.2f dB", first + i, before, after));
    }
    return s;
}

Outcome declipping(const Checkpoint& ck, std::size_t items) {
    const auto s = declip_run(ck, kHeldOut, items, kDeclipXiPrime, true);
    const double rate = double(s.improved) / double(items);
    return {rate >= 0.8, fmt("xi' = %g, T = 140: SDR improved on %d/%zu items (need >= 80%%), mean gain %.2f dB", kDeclipXiPrime, s.improved, items,
                             s.mean_gain_db)};
}

void tune_declip(const Checkpoint& ck) {
    std::cout << "declip xi' on dev items " << kDevSplit << ".." << kDevSplit + 7 << "\n";
    for (double xi : {0.05, 0.1, 0.2, 0.3, 0.5, 1.0}) {
        const auto s = declip_run(ck, kDevSplit, 8, xi, false);
        std::cout << fmt("  xi' = %-5g improved %d/8, mean gain %.3f dB\n", xi, s.improved, s.mean_gain_db) << std::flush;
    }
}

// ---------------------------------------------------------------------------
// 9

Outcome unconditional_identity(const std::string& ckpt_path) {
    std::optional<Checkpoint> ck;
    if (fs::exists(ckpt_path)) ck = load_checkpoint(ckpt_path);
    Checkpoint fallback;
    if (!ck) {
        fallback.model = tiny_config();
        fallback.segment_len = 4096;
        fallback.sigma_data = 0.3;
        Denoiser<double> d(fallback.model, 4096, SigmaData(0.3));
        fallback.params = d.init_params(3, false);
    }
    const Checkpoint& c = ck ? *ck : fallback;
    LoadedModel<float> lm(c, c.segment_len);
    const auto model = lm.model();
    const double fs = c.model.cqt.sample_rate_hz;
    const auto y = synth_item(toy_corpus(c.segment_len), kHeldOut);
    SamplerConfig sc;
    sc.seed = 17;
    const auto plain = sample(model, sc, {}, fs);
    bool same = true;
    for (const DegradationSpec spec : {DegradationSpec{Lowpass{1000.0, 500, 8.0}}, DegradationSpec{Clip{0.2}}}) {
        GuidanceConfig g;
        g.mode = GuidanceMode::rg;
        g.xi_prime = 0.0;
        g.degradation = spec;
        g.observations = Degradation(spec, y.size(), fs).apply(y);
        same = same && sample(model, sc, g, fs) == plain;
    }
    return {same, std::string(same ? "bit-identical" : "DIFFERENT") + " to unconditional sampling (lowpass and clip observations, " +
                      (ck ? "trained" : "random") + " model)"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("acceptance criteria");
    std::string root = CQTDIFF_SOURCE_DIR;
    std::string ckpt = root + "/artifacts/toy/latest.ckpt";
    std::string log = root + "/artifacts/toy/loss.tsv";
    std::vector<int> only;
    std::size_t items = 20, samples = 32;
    bool tune = false;
    app.add_option("--checkpoint", ckpt)->capture_default_str();
    app.add_option("--loss-log", log)->capture_default_str();
    app.add_option("--only", only, "criteria to run (default: all)");
    app.add_option("--items", items, "items for criteria 7 and 8")->capture_default_str();
    app.add_option("--samples", samples, "unconditional samples for criterion 5")->capture_default_str();
    app.add_flag("--tune-declip", tune, "sweep the declipping step size on the dev split and exit");
    CLI11_PARSE(app, argc, argv);

    std::optional<Checkpoint> ck;
    if (fs::exists(ckpt)) ck = load_checkpoint(ckpt);
    if (tune) {
        if (!ck) {
            std::cerr << "no checkpoint at " << ckpt << "\n";
            return 1;
        }
        tune_declip(*ck);
        return 0;
    }
    auto needs_model = [&](auto fn) -> std::function<Outcome()> {
        return [&ck, &ckpt, fn]() -> Outcome {
            if (!ck) return {false, "no trained checkpoint at " + ckpt};
            return fn(*ck);
        };
    };
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"CQT perfect reconstruction", cqt_reconstruction},
        {"adjoint and gradient suite", gradient_suite},
        {"schedule exactness", schedule_exactness},
        {"Gaussian-oracle sampling", gaussian_oracle},
        {"toy training", [&] { return toy_training(ckpt, log, samples); }},
        {"BWE consistency", needs_model([](const Checkpoint& c) { return bwe_consistency(c); })},
        {"inpainting contract", needs_model([&](const Checkpoint& c) { return inpainting(c, items); })},
        {"declipping direction", needs_model([&](const Checkpoint& c) { return declipping(c, items); })},
        {"unconditional-reduction identity", [&] { return unconditional_identity(ckpt); }},
    };
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = criteria[k].second();
        } catch (const std::exception& e) {
            r = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !r.pass;
        std::cout << "criterion " << id << " " << (r.pass ? "PASS" : "FAIL") << "  " << criteria[k].first << ": " << r.summary
                  << fmt(" [%.0f s]", secs) << "\n"
                  << std::flush;
    }
    return failed == 0 ? 0 : 1;
}
