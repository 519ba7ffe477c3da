// Command-line front end: train, sample, restore, eval.
//
// Exit codes: 0 ok, 1 user error, 2 numerical failure.

#include "cqtdiff/app/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace cqtdiff;
using namespace cqtdiff::app;

namespace {

SamplerConfig sampler_from(ConfigFile& c, SamplerConfig s) {
    s.schedule.steps = static_cast<int>(c.integer("sampler.steps", s.schedule.steps));
    s.schedule.sigma_min = c.real("sampler.sigma_min", s.schedule.sigma_min);
    s.schedule.sigma_max = c.real("sampler.sigma_max", s.schedule.sigma_max);
    s.schedule.rho = c.real("sampler.rho", s.schedule.rho);
    s.s_churn = c.real("sampler.s_churn", s.s_churn);
    s.s_noise = c.real("sampler.s_noise", s.s_noise);
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CQT-domain diffusion model for audio restoration"};
    app.require_subcommand(1);

    std::string train_config;
    bool resume = false, quiet = false;
    auto* train = app.add_subcommand("train", "train a denoiser from a config file");
    train->add_option("config", train_config, "config file")->required()->check(CLI::ExistingFile);
    train->add_flag("--resume", resume, "continue from <out_dir>/latest.ckpt");
    train->add_flag("-q,--quiet", quiet, "no progress output");

    SampleOptions so;
    std::string sample_config;
    int sample_steps = 0;
    auto* samp = app.add_subcommand("sample", "draw unconditional samples");
    samp->add_option("checkpoint", so.checkpoint)->required()->check(CLI::ExistingFile);
    samp->add_option("-n,--count", so.count, "number of samples")->capture_default_str();
    samp->add_option("--seed", so.seed)->capture_default_str();
    samp->add_option("--length", so.length, "samples per output (power of two; default: training length)");
    samp->add_option("--steps", sample_steps, "sampler steps");
    samp->add_option("--s-churn", so.sampler.s_churn)->capture_default_str();
    samp->add_option("--config", sample_config, "config file with a [sampler] section")->check(CLI::ExistingFile);
    samp->add_option("-o,--out-dir", so.out_dir)->capture_default_str();

    RestoreOptions ro;
    std::string task = "bwe", mode, scaling = "squared_norm", format = "float32";
    std::vector<double> gap;
    double threshold = 0, sdr_target = 0, xi = -1;
    int steps = 0;
    auto* rest = app.add_subcommand("restore", "restore a degraded recording");
    rest->add_option("checkpoint", ro.checkpoint)->required()->check(CLI::ExistingFile);
    rest->add_option("input", ro.input)->required()->check(CLI::ExistingFile);
    rest->add_option("-o,--output", ro.output)->required();
    rest->add_option("--task", task, "bwe | inpaint | declip")->capture_default_str();
    rest->add_option("--cutoff", ro.cutoff_hz, "bwe cutoff in Hz")->capture_default_str();
    rest->add_option("--gap", gap, "inpaint gap start and end in seconds")->expected(2);
    auto* thr = rest->add_option("--threshold", threshold, "declip clipping level");
    auto* sdr_opt = rest->add_option("--sdr", sdr_target, "declip target SDR in dB (with --simulate)");
    rest->add_option("--mode", mode, "none | dc | rg | dc+rg (default per task)");
    rest->add_option("--xi", xi, "guidance step xi'");
    rest->add_option("--xi-scaling", scaling, "squared_norm | norm")->capture_default_str();
    rest->add_option("--steps", steps, "sampler steps (default 35, declip 140)");
    rest->add_option("--s-churn", ro.s_churn)->capture_default_str();
    rest->add_option("--seed", ro.seed)->capture_default_str();
    rest->add_flag("--simulate", ro.simulate, "treat the input as clean and degrade it first");
    rest->add_option("--format", format, "float32 | pcm16")->capture_default_str();

    EvalOptions eo;
    bool plots = false;
    auto* ev = app.add_subcommand("eval", "LSD and SDR of estimates against references");
    ev->add_option("ref_dir", eo.ref_dir)->required();
    ev->add_option("est_dir", eo.est_dir)->required();
    ev->add_option("-o,--output", eo.output, "metrics table (default stdout)");
    ev->add_flag("--plots", plots, "write CQT magnitude images and matrices");
    ev->add_option("--plots-dir", eo.plots_dir, "where --plots writes (default <est_dir>/plots)");
    ev->add_option("-j,--jobs", eo.jobs)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train) {
            auto cfg = ConfigFile::load(train_config);
            TrainOptions opts;
            opts.resume = resume;
            opts.progress = quiet ? nullptr : &std::cerr;
            cmd_train(TrainConfig::from(cfg), opts);
        } else if (*samp) {
            if (!sample_config.empty()) {
                auto cfg = ConfigFile::load(sample_config);
                so.sampler = sampler_from(cfg, so.sampler);
                cfg.reject_unknown();
            }
            if (sample_steps > 0) so.sampler.schedule.steps = sample_steps;
            for (const auto& p : cmd_sample(so)) std::cout << p << "\n";
        } else if (*rest) {
            ro.task = parse_task(task);
            if (!gap.empty()) {
                ro.gap_start_s = gap[0];
                ro.gap_end_s = gap[1];
            } else if (ro.task == Task::inpaint) {
                throw UsageError("restore: inpaint needs --gap START END");
            }
            if (*thr) ro.clip_threshold = threshold;
            if (*sdr_opt) ro.clip_sdr_db = sdr_target;
            if (!mode.empty()) ro.mode = parse_guidance_mode(mode);
            if (xi >= 0) ro.xi_prime = xi;
            if (steps > 0) ro.steps = steps;
            if (scaling == "norm")
                ro.scaling = XiScaling::norm;
            else if (scaling != "squared_norm")
                throw UsageError("restore: --xi-scaling must be squared_norm or norm");
            if (format == "pcm16")
                ro.format = WavFormat::pcm16;
            else if (format != "float32")
                throw UsageError("restore: --format must be float32 or pcm16");
            const auto mf = cmd_restore(ro);
            std::cout << mf.text();
        } else if (*ev) {
            if (plots && eo.plots_dir.empty()) eo.plots_dir = (fs::path(eo.est_dir) / "plots").string();
            if (!plots) eo.plots_dir.clear();
            cmd_eval(eo);
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
