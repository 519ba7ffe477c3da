#pragma once

// Sectioned key-value configuration:
//
//   # comment
//   [section]
//   key = value
//
// Every key must be known to the consumer; leftovers are reported as errors.

#include "cqtdiff/common.hpp"
#include "cqtdiff/denoiser.hpp"
#include "cqtdiff/diffusion.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cqtdiff::app {

class ConfigFile {
public:
    static ConfigFile parse(const std::string& text, const std::string& origin = "<config>") {
        ConfigFile cfg;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            line = trim(line);
            if (line.empty()) continue;
            const std::string where = origin + ":" + std::to_string(lineno);
            if (line.front() == '[') {
                if (line.back() != ']') throw UsageError(where + ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty()) throw UsageError(where + ": empty section name");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
            if (section.empty()) throw UsageError(where + ": key outside of a section");
            const std::string key = section + "." + trim(line.substr(0, eq));
            if (cfg.values_.count(key)) throw UsageError(where + ": duplicate key '" + key + "'");
            cfg.values_[key] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw UsageError("config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string str(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double real(const std::string& key, double fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const std::string v = str(key, "");
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw UsageError("config: '" + key + "' expects a number, got '" + v + "'");
        }
    }

    long long integer(const std::string& key, long long fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const std::string v = str(key, "");
        try {
            std::size_t pos = 0;
            const long long d = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw UsageError("config: '" + key + "' expects an integer, got '" + v + "'");
        }
    }

    std::vector<int> int_list(const std::string& key, const std::vector<int>& fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        std::vector<int> out;
        std::stringstream ss(str(key, ""));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            try {
                std::size_t pos = 0;
                out.push_back(std::stoi(item, &pos));
                if (pos != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw UsageError("config: '" + key + "' expects a comma-separated integer list");
            }
        }
        return out;
    }

    /// Throws on keys that no consumer asked for.
    void reject_unknown() const {
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) throw UsageError("config: unknown key '" + k + "'");
    }

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

struct TrainConfig {
    // [data]
    std::string corpus = "synthetic";  // or a directory of WAV files
    std::size_t items = 2000;
    std::uint64_t corpus_seed = 1;
    std::size_t segment_len = 4096;
    // [model]
    DenoiserConfig model;
    // [train]
    std::size_t steps = 20000;
    std::size_t batch = 4;
    grad::AdamConfig adam;
    std::uint64_t seed = 7;
    std::size_t log_every = 10;
    std::size_t checkpoint_every = 1000;
    std::string out_dir = "run";
    // [schedule]
    NoiseSchedule schedule = NoiseSchedule::training();

    static TrainConfig from(ConfigFile& c) {
        TrainConfig t;
        t.corpus = c.str("data.corpus", t.corpus);
        t.items = static_cast<std::size_t>(c.integer("data.items", static_cast<long long>(t.items)));
        t.corpus_seed = static_cast<std::uint64_t>(c.integer("data.seed", static_cast<long long>(t.corpus_seed)));
        t.segment_len = static_cast<std::size_t>(c.integer("data.segment_len", static_cast<long long>(t.segment_len)));

        auto& m = t.model;
        m.cqt.bins_per_octave = static_cast<int>(c.integer("cqt.bins_per_octave", m.cqt.bins_per_octave));
        m.cqt.octaves = static_cast<int>(c.integer("cqt.octaves", m.cqt.octaves));
        m.cqt.sample_rate_hz = c.real("cqt.sample_rate_hz", m.cqt.sample_rate_hz);
        m.cqt.f_min_hz = c.real("cqt.f_min_hz", m.cqt.f_min_hz);
        const std::string window = c.str("cqt.window", "hann");
        if (window != "hann") throw UsageError("config: cqt.window supports only 'hann'");
        m.depth = static_cast<int>(c.integer("model.depth", m.depth));
        m.base_channels = static_cast<int>(c.integer("model.base_channels", m.base_channels));
        m.dilations = c.int_list("model.dilations", m.dilations);
        m.rff_features = static_cast<int>(c.integer("model.rff_features", m.rff_features));
        m.embed_dim = static_cast<int>(c.integer("model.embed_dim", m.embed_dim));
        m.positional_channels = static_cast<int>(c.integer("model.positional_channels", m.positional_channels));
        m.kernel_size = static_cast<int>(c.integer("model.kernel_size", m.kernel_size));

        t.steps = static_cast<std::size_t>(c.integer("train.steps", static_cast<long long>(t.steps)));
        t.batch = static_cast<std::size_t>(c.integer("train.batch", static_cast<long long>(t.batch)));
        t.adam.lr = c.real("train.lr", t.adam.lr);
        t.adam.beta1 = c.real("train.beta1", t.adam.beta1);
        t.adam.beta2 = c.real("train.beta2", t.adam.beta2);
        t.adam.eps = c.real("train.eps", t.adam.eps);
        t.seed = static_cast<std::uint64_t>(c.integer("train.seed", static_cast<long long>(t.seed)));
        t.log_every = static_cast<std::size_t>(c.integer("train.log_every", static_cast<long long>(t.log_every)));
        t.checkpoint_every = static_cast<std::size_t>(c.integer("train.checkpoint_every", static_cast<long long>(t.checkpoint_every)));
        t.out_dir = c.str("train.out_dir", t.out_dir);

        t.schedule.sigma_min = c.real("schedule.sigma_min", t.schedule.sigma_min);
        t.schedule.sigma_max = c.real("schedule.sigma_max", t.schedule.sigma_max);
        t.schedule.rho = c.real("schedule.rho", t.schedule.rho);
        c.reject_unknown();
        t.validate();
        return t;
    }

    void validate() const {
        model.validate();
        schedule.validate();
        require(items >= 1, "config: data.items must be >= 1");
        require(batch >= 1, "config: train.batch must be >= 1");
        require(log_every >= 1 && checkpoint_every >= 1, "config: logging intervals must be >= 1");
        require(adam.lr > 0.0, "config: train.lr must be positive");
    }
};

}  // namespace cqtdiff::app
