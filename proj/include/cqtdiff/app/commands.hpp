#pragma once

// train / sample / restore / eval.

#include "cqtdiff/app/checkpoint.hpp"
#include "cqtdiff/app/config.hpp"
#include "cqtdiff/app/corpus.hpp"
#include "cqtdiff/app/wav.hpp"
#include "cqtdiff/diffusion.hpp"
#include "cqtdiff/metrics.hpp"

#include <array>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cqtdiff::app {

namespace fs = std::filesystem;

inline std::uint64_t fnv1a_bytes(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
inline std::string file_digest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("digest: cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a_bytes(ss.str()));
    return buf;
}

inline std::string fmt_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

/// Ordered key = value record of everything that determines a run.
class RunManifest {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& kv : entries_)
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        entries_.emplace_back(key, value);
    }
    void set(const std::string& key, double value) { set(key, fmt_real(value)); }
    void set(const std::string& key, long long value) { set(key, std::to_string(value)); }

    std::string get(const std::string& key) const {
        for (const auto& kv : entries_)
            if (kv.first == key) return kv.second;
        throw UsageError("manifest: missing key '" + key + "'");
    }

    std::string text() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw UsageError("manifest: cannot write '" + path + "'");
        f << text();
    }

    static RunManifest read(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw UsageError("manifest: cannot open '" + path + "'");
        RunManifest m;
        std::string line;
        while (std::getline(f, line)) {
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) continue;
            m.set(line.substr(0, eq), line.substr(eq + 3));
        }
        return m;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

// ---------------------------------------------------------------------------
// train

inline std::vector<std::vector<double>> load_training_corpus(const TrainConfig& cfg) {
    if (cfg.corpus == "synthetic") {
        CorpusSpec spec;
        spec.seed = cfg.corpus_seed;
        spec.items = cfg.items;
        spec.samples = cfg.segment_len;
        spec.sample_rate_hz = cfg.model.cqt.sample_rate_hz;
        return gen_synthetic_corpus(spec);
    }
    if (!fs::is_directory(cfg.corpus)) throw UsageError("train: corpus '" + cfg.corpus + "' is neither 'synthetic' nor a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(cfg.corpus))
        if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    std::vector<std::vector<double>> out;
    for (const auto& path : files) {
        const auto seg = load_wav(path, cfg.model.cqt.sample_rate_hz);
        for (std::size_t at = 0; at + cfg.segment_len <= seg.size() && out.size() < cfg.items; at += cfg.segment_len)
            out.emplace_back(seg.samples.begin() + static_cast<std::ptrdiff_t>(at),
                             seg.samples.begin() + static_cast<std::ptrdiff_t>(at + cfg.segment_len));
        if (out.size() >= cfg.items) break;
    }
    if (out.empty()) throw UsageError("train: no segments of " + std::to_string(cfg.segment_len) + " samples in '" + cfg.corpus + "'");
    return out;
}

/// Upper edges of the noise-level buckets in the loss log.
inline const std::array<double, 5>& sigma_bucket_edges() {
    static const std::array<double, 5> edges = {1e-4, 1e-2, 1e-1, 1.0, std::numeric_limits<double>::infinity()};
    return edges;
}

inline std::string loss_log_header() { return "step\twall_s\tloss\tsigma<1e-4\tsigma<1e-2\tsigma<1e-1\tsigma<1\tsigma>=1"; }

struct TrainOptions {
    bool resume = false;
    std::ostream* progress = &std::cerr;
};

/// Trains in single precision and writes checkpoints plus loss.tsv to out_dir.
inline void cmd_train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const auto corpus = load_training_corpus(cfg);
    const SigmaData sd = estimate_sigma_data(corpus);
    Denoiser<float> den(cfg.model, cfg.segment_len, sd);

    const std::string latest = (fs::path(cfg.out_dir) / "latest.ckpt").string();
    const std::string log_path = (fs::path(cfg.out_dir) / "loss.tsv").string();
    grad::ParamStore<float> params;
    std::uint64_t start = 0;
    if (opts.resume && fs::exists(latest)) {
        auto ck = load_checkpoint(latest);
        if (!(ck.model == cfg.model) || ck.segment_len != cfg.segment_len)
            throw UsageError("train: checkpoint in '" + cfg.out_dir + "' was written with a different model config");
        params = ck.params.cast<float>();
        start = ck.train_step;
    } else {
        params = den.init_params(cfg.seed);
        std::ofstream(log_path) << loss_log_header() << "\n";
    }
    std::ofstream log(log_path, std::ios::app);
    if (!log) throw UsageError("train: cannot write '" + log_path + "'");

    auto save = [&](std::uint64_t step) {
        Checkpoint ck;
        ck.model = cfg.model;
        ck.segment_len = cfg.segment_len;
        ck.sigma_data = sd.value();
        ck.train_step = step;
        ck.rng_seed = cfg.seed;
        ck.params = params.cast<double>();
        char name[32];
        std::snprintf(name, sizeof name, "step_%07" PRIu64 ".ckpt", step);
        save_checkpoint(ck, (fs::path(cfg.out_dir) / name).string());
        save_checkpoint(ck, latest);
    };

    const auto& edges = sigma_bucket_edges();
    std::array<double, 5> bucket_sum{}, bucket_n{};
    double window_sum = 0.0;
    std::size_t window_n = 0;
    const auto t0 = std::chrono::steady_clock::now();
    if (opts.progress)
        *opts.progress << "train: " << corpus.size() << " segments, sigma_data=" << sd.value() << ", "
                       << params.parameter_count() << " parameters, bands=" << den.plan().band_count()
                       << " frames=" << den.plan().frames << "\n";
    for (std::uint64_t step = start; step < cfg.steps; ++step) {
        CounterRng rng(cfg.seed, 0x7EA1, step);
        std::vector<std::vector<double>> batch;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto idx = std::min(corpus.size() - 1, static_cast<std::size_t>(rng.uniform() * double(corpus.size())));
            batch.push_back(corpus[idx]);
        }
        const auto res = train_step(den, params, batch, cfg.schedule, rng, cfg.adam);
        for (const auto& it : res.items) {
            std::size_t k = 0;
            while (it.sigma >= edges[k]) ++k;
            bucket_sum[k] += it.loss;
            bucket_n[k] += 1;
        }
        window_sum += res.loss;
        ++window_n;
        const std::uint64_t done = step + 1;
        if (done % cfg.log_every == 0 || done == cfg.steps) {
            const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log << done << '\t' << std::fixed << std::setprecision(2) << wall << std::defaultfloat << std::setprecision(8) << '\t'
                << window_sum / double(window_n);
            for (std::size_t k = 0; k < edges.size(); ++k) {
                log << '\t';
                if (bucket_n[k] > 0)
                    log << bucket_sum[k] / bucket_n[k];
                else
                    log << "nan";
            }
            log << '\n' << std::flush;
            if (opts.progress) *opts.progress << "step " << done << " loss " << window_sum / double(window_n) << " (" << wall << " s)\n";
            bucket_sum.fill(0.0);
            bucket_n.fill(0.0);
            window_sum = 0.0;
            window_n = 0;
        }
        if (done % cfg.checkpoint_every == 0 || done == cfg.steps) save(done);
    }
}

// ---------------------------------------------------------------------------
// Model loading

/// Owns a denoiser for one signal length plus its parameters.
template <class T>
struct LoadedModel {
    Checkpoint ck;
    std::unique_ptr<Denoiser<T>> den;
    grad::ParamStore<T> params;

    LoadedModel(Checkpoint c, std::size_t signal_len) : ck(std::move(c)) {
        den = std::make_unique<Denoiser<T>>(ck.model, signal_len, SigmaData(ck.sigma_data));
        params = ck.params.template cast<T>();
    }

    NetworkModel<T> model() const { return NetworkModel<T>(*den, params); }
};

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// Reflection padding at the end to `len` samples.
inline std::vector<double> reflect_pad(std::span<const double> x, std::size_t len) {
    if (x.empty()) throw UsageError("pad: empty signal");
    std::vector<double> out(x.begin(), x.end());
    out.reserve(len);
    const std::size_t n = x.size();
    while (out.size() < len) {
        if (n == 1) {
            out.push_back(x[0]);
            continue;
        }
        // mirror without repeating the edge sample: n-2, n-3, ..., 0, 1, ...
        const std::size_t k = out.size() - n;
        const std::size_t period = 2 * (n - 1);
        const std::size_t r = (k + 1) % period;
        out.push_back(r < n - 1 ? x[n - 1 - r] : x[r - (n - 1)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
    std::string checkpoint;
    std::size_t count = 1;
    std::uint64_t seed = 0;
    std::size_t length = 0;  // 0: training segment length
    SamplerConfig sampler;
    std::string out_dir = ".";
};

inline std::vector<std::string> cmd_sample(const SampleOptions& o) {
    auto ck = load_checkpoint(o.checkpoint);
    const std::size_t len = o.length ? o.length : ck.segment_len;
    if (next_pow2(len) != len) throw UsageError("sample: length must be a power of two");
    LoadedModel<float> lm(std::move(ck), len);
    const auto model = lm.model();
    fs::create_directories(o.out_dir);
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < o.count; ++i) {
        SamplerConfig sc = o.sampler;
        sc.seed = o.seed + i;
        const auto x = sample(model, sc, {}, lm.ck.model.cqt.sample_rate_hz);
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu.wav", i);
        const std::string path = (fs::path(o.out_dir) / name).string();
        save_wav(AudioSegment(x, lm.ck.model.cqt.sample_rate_hz), path);
        paths.push_back(path);
    }
    return paths;
}

// ---------------------------------------------------------------------------
// restore

enum class Task { bwe, inpaint, declip };

inline Task parse_task(const std::string& s) {
    if (s == "bwe") return Task::bwe;
    if (s == "inpaint") return Task::inpaint;
    if (s == "declip") return Task::declip;
    throw UsageError("unknown task '" + s + "' (bwe, inpaint, declip)");
}

inline std::string to_string(Task t) {
    switch (t) {
        case Task::bwe: return "bwe";
        case Task::inpaint: return "inpaint";
        case Task::declip: return "declip";
    }
    return "?";
}

/// Default declipping step size, chosen on a held-out split of the toy corpus.
inline constexpr double kDeclipXiPrime = 0.3;

struct RestoreOptions {
    std::string checkpoint;
    std::string input;
    std::string output;
    Task task = Task::bwe;
    double cutoff_hz = 1000.0;
    double gap_start_s = 0.0;
    double gap_end_s = 0.0;
    std::optional<double> clip_threshold;
    std::optional<double> clip_sdr_db;
    std::optional<GuidanceMode> mode;
    std::optional<double> xi_prime;
    std::optional<int> steps;
    XiScaling scaling = XiScaling::squared_norm;
    double s_churn = 5.0;
    std::uint64_t seed = 0;
    bool simulate = false;  // input is clean; degrade it first
    WavFormat format = WavFormat::float32;
};

inline DegradationSpec restore_degradation(const RestoreOptions& o) {
    switch (o.task) {
        case Task::bwe: return Lowpass{o.cutoff_hz, 500, 8.0};
        case Task::inpaint: return Mask{o.gap_start_s, o.gap_end_s};
        case Task::declip:
            if (o.clip_sdr_db) return ClipBySdr{*o.clip_sdr_db};
            if (o.clip_threshold) return Clip{*o.clip_threshold};
            return ClipBySdr{std::numeric_limits<double>::quiet_NaN()};
    }
    throw UsageError("restore: unknown task");
}

struct RestoreResult {
    std::vector<double> restored;
    std::vector<double> observed;
    RunManifest manifest;
};

/// Restores one signal already in memory. `x` is the observation, or the
/// clean input when simulating.
inline RestoreResult restore_signal(const Checkpoint& ck_in, std::span<const double> x, const RestoreOptions& o) {
    const double fs = ck_in.model.cqt.sample_rate_hz;
    const GuidanceMode mode = o.mode.value_or(o.task == Task::declip ? GuidanceMode::rg : GuidanceMode::dc_rg);
    const double xi = o.xi_prime.value_or(o.task == Task::bwe ? 0.1 : o.task == Task::inpaint ? 0.35 : kDeclipXiPrime);
    const int steps = o.steps.value_or(o.task == Task::declip ? 140 : 35);
    if (o.task == Task::declip && uses_dc(mode)) throw UsageError("data consistency unavailable for nonlinear degradation");
    if (x.empty()) throw UsageError("restore: empty input");

    DegradationSpec spec = restore_degradation(o);
    std::vector<double> y(x.begin(), x.end());
    if (o.simulate) {
        if (const auto* s = std::get_if<ClipBySdr>(&spec); s && std::isnan(s->target_sdr_db))
            throw UsageError("restore: simulated declipping needs --threshold or --sdr");
        spec = Degradation::resolve(spec, x);
        y = Degradation(spec, x.size(), fs).apply(x);
    } else if (const auto* s = std::get_if<ClipBySdr>(&spec)) {
        if (!std::isnan(s->target_sdr_db)) throw UsageError("restore: --sdr needs --simulate (a clean input); use --threshold");
        double peak = 0.0;
        for (double v : y) peak = std::max(peak, std::abs(v));
        if (peak == 0.0) throw UsageError("restore: silent input");
        spec = Clip{peak};
    }

    const std::size_t n = y.size();
    const std::size_t len = std::max(next_pow2(n), ck_in.segment_len);
    Checkpoint ck = ck_in;
    LoadedModel<float> lm(std::move(ck), len);
    const auto model = lm.model();

    GuidanceConfig g;
    g.mode = mode;
    g.xi_prime = xi;
    g.scaling = o.scaling;
    g.degradation = spec;
    g.observations = reflect_pad(y, len);
    if (const auto* m = std::get_if<Mask>(&spec)) {
        const double dur = double(n) / fs;
        if (m->t_end > dur + 1e-12) throw UsageError("restore: gap ends after the input");
    }
    SamplerConfig sc;
    sc.schedule = NoiseSchedule::sampling(steps);
    sc.s_churn = o.s_churn;
    sc.seed = o.seed;
    auto out = sample(model, sc, g, fs);
    out.resize(n);

    RestoreResult r;
    r.restored = std::move(out);
    r.observed = std::move(y);
    auto& mf = r.manifest;
    mf.set("task", to_string(o.task));
    mf.set("degradation", degradation_name(spec));
    std::visit(
        [&](const auto& d) {
            using D = std::decay_t<decltype(d)>;
            if constexpr (std::is_same_v<D, Lowpass>) {
                mf.set("lowpass.cutoff_hz", d.cutoff_hz);
                mf.set("lowpass.order", static_cast<long long>(d.order));
                mf.set("lowpass.kaiser_beta", d.kaiser_beta);
            } else if constexpr (std::is_same_v<D, Mask>) {
                mf.set("mask.t_start", d.t_start);
                mf.set("mask.t_end", d.t_end);
            } else if constexpr (std::is_same_v<D, Clip>) {
                mf.set("clip.threshold", d.threshold);
            }
        },
        spec);
    if (o.clip_sdr_db) mf.set("clip.target_sdr_db", *o.clip_sdr_db);
    mf.set("guidance.mode", to_string(mode));
    mf.set("guidance.xi_prime", xi);
    mf.set("guidance.scaling", std::string(o.scaling == XiScaling::squared_norm ? "squared_norm" : "norm"));
    mf.set("guidance.final_projection", std::string(g.final_projection ? "true" : "false"));
    mf.set("sampler.steps", static_cast<long long>(steps));
    mf.set("sampler.sigma_min", sc.schedule.sigma_min);
    mf.set("sampler.sigma_max", sc.schedule.sigma_max);
    mf.set("sampler.rho", sc.schedule.rho);
    mf.set("sampler.s_churn", sc.s_churn);
    mf.set("sampler.s_noise", sc.s_noise);
    mf.set("sampler.s_tmin", sc.s_tmin);
    mf.set("sampler.s_tmax", sc.s_tmax);
    mf.set("seed", static_cast<long long>(o.seed));
    mf.set("simulate", std::string(o.simulate ? "true" : "false"));
    mf.set("signal.samples", static_cast<long long>(n));
    mf.set("signal.padded_to", static_cast<long long>(len));
    mf.set("signal.sample_rate_hz", fs);
    mf.set("model.sigma_data", ck_in.sigma_data);
    mf.set("model.train_step", static_cast<long long>(ck_in.train_step));
    mf.set("model.precision", std::string("float32"));
    mf.set("metrics.lsd_window", 1024LL);
    mf.set("metrics.lsd_hop", 256LL);
    mf.set("metrics.lsd_floor", 1e-10);
    return r;
}

inline RunManifest cmd_restore(const RestoreOptions& o) {
    const auto ck = load_checkpoint(o.checkpoint);
    const auto in = load_wav(o.input, ck.model.cqt.sample_rate_hz);
    auto r = restore_signal(ck, in.samples, o);
    save_wav(AudioSegment(r.restored, in.sample_rate_hz), o.output, o.format);
    if (o.simulate) {
        const std::string deg = fs::path(o.output).replace_extension(".degraded.wav").string();
        save_wav(AudioSegment(r.observed, in.sample_rate_hz), deg, o.format);
        r.manifest.set("degraded.path", deg);
        r.manifest.set("degraded.digest", file_digest(deg));
    }
    r.manifest.set("checkpoint.path", o.checkpoint);
    r.manifest.set("checkpoint.digest", file_digest(o.checkpoint));
    r.manifest.set("input.path", o.input);
    r.manifest.set("input.digest", file_digest(o.input));
    r.manifest.set("output.path", o.output);
    r.manifest.set("output.digest", file_digest(o.output));
    r.manifest.write(o.output + ".manifest");
    return r.manifest;
}

// ---------------------------------------------------------------------------
// eval

struct EvalRow {
    std::string name;
    double lsd;
    double sdr;
};

/// Grayscale image of a log-magnitude CQT, low frequencies at the bottom,
/// 80 dB below the peak mapped to black.
inline void write_cqt_plot(std::span<const double> x, double fs, const std::string& stem) {
    CqtConfig cc;
    cc.sample_rate_hz = fs;
    const std::size_t len = std::max<std::size_t>(next_pow2(x.size()), 4096);
    const auto plan = build_plan(cc, len);
    const auto padded = reflect_pad(x, len);
    const auto S = forward(plan, std::span<const double>(padded));
    const auto mag = magnitude(S);
    double peak = 1e-300;
    for (double v : mag) peak = std::max(peak, v);
    std::ofstream pgm(stem + ".pgm", std::ios::binary);
    pgm << "P5\n" << S.frames << " " << S.bands << "\n255\n";
    for (std::size_t b = S.bands; b-- > 0;)
        for (std::size_t n = 0; n < S.frames; ++n) {
            const double db = 20.0 * std::log10(std::max(mag[b * S.frames + n] / peak, 1e-12));
            pgm.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp((db + 80.0) / 80.0, 0.0, 1.0)))));
        }
    std::ofstream txt(stem + ".tsv");
    txt << std::setprecision(9);
    for (std::size_t b = 0; b < S.bands; ++b) {
        for (std::size_t n = 0; n < S.frames; ++n) txt << (n ? "\t" : "") << mag[b * S.frames + n];
        txt << '\n';
    }
}

struct EvalOptions {
    std::string ref_dir;
    std::string est_dir;
    std::string output;  // empty: stdout
    std::string plots_dir;
    unsigned jobs = 1;
};

inline std::vector<EvalRow> cmd_eval(const EvalOptions& o) {
    if (!fs::is_directory(o.ref_dir)) throw UsageError("eval: '" + o.ref_dir + "' is not a directory");
    if (!fs::is_directory(o.est_dir)) throw UsageError("eval: '" + o.est_dir + "' is not a directory");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(o.ref_dir))
        if (e.is_regular_file() && e.path().extension() == ".wav") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (!o.plots_dir.empty()) fs::create_directories(o.plots_dir);

    auto one = [&](const std::string& name) {
        const auto est_path = fs::path(o.est_dir) / name;
        if (!fs::exists(est_path)) throw UsageError("eval: no estimate for '" + name + "'");
        const auto ref = load_wav((fs::path(o.ref_dir) / name).string());
        const auto est = load_wav(est_path.string());
        if (ref.size() != est.size()) throw UsageError("eval: length mismatch for '" + name + "'");
        if (!o.plots_dir.empty()) {
            const auto stem = fs::path(name).stem().string();
            write_cqt_plot(ref.samples, ref.sample_rate_hz, (fs::path(o.plots_dir) / (stem + ".ref")).string());
            write_cqt_plot(est.samples, est.sample_rate_hz, (fs::path(o.plots_dir) / (stem + ".est")).string());
        }
        return EvalRow{name, lsd(ref.samples, est.samples), sdr(ref.samples, est.samples)};
    };

    std::vector<EvalRow> rows(names.size());
    const unsigned jobs = std::max(1u, o.jobs);
    for (std::size_t at = 0; at < names.size(); at += jobs) {
        std::vector<std::future<EvalRow>> batch;
        for (std::size_t i = at; i < std::min(names.size(), at + jobs); ++i)
            batch.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, one, names[i]));
        for (std::size_t i = 0; i < batch.size(); ++i) rows[at + i] = batch[i].get();
    }

    std::ostringstream os;
    os << "file\tlsd\tsdr_db\n" << std::setprecision(10);
    for (const auto& r : rows) os << r.name << '\t' << r.lsd << '\t' << fmt_real(r.sdr) << '\n';
    if (o.output.empty()) {
        std::cout << os.str();
    } else {
        std::ofstream f(o.output);
        if (!f) throw UsageError("eval: cannot write '" + o.output + "'");
        f << os.str();
    }
    return rows;
}

}  // namespace cqtdiff::app
