#pragma once

// Self-contained model checkpoint.
//
//   "CQDCKPT1"  u32 version
//   cqt:      i32 bins_per_octave, i32 octaves, f64 sample_rate, f64 f_min, u8 window
//   model:    i32 depth, i32 base_channels, u32 n, i32 dilations[n], i32 rff_features,
//             i32 embed_dim, i32 positional_channels, i32 kernel_size
//   u64 segment_len, f64 sigma_data, u64 train_step, u64 rng_seed
//   parameter container (see params.hpp)

#include "cqtdiff/denoiser.hpp"
#include "cqtdiff/params.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace cqtdiff::app {

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    DenoiserConfig model;
    std::size_t segment_len = 0;
    double sigma_data = 1.0;
    std::uint64_t train_step = 0;
    std::uint64_t rng_seed = 0;
    grad::ParamStore<double> params;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'Q', 'D', 'C', 'K', 'P', 'T', '1'};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    using namespace grad::io;
    os.write(kCheckpointMagic, 8);
    write_le<std::uint32_t>(os, Checkpoint::kVersion);
    const auto& c = ck.model.cqt;
    write_le<std::int32_t>(os, c.bins_per_octave);
    write_le<std::int32_t>(os, c.octaves);
    write_le<double>(os, c.sample_rate_hz);
    write_le<double>(os, c.f_min_hz);
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(c.window));
    const auto& m = ck.model;
    write_le<std::int32_t>(os, m.depth);
    write_le<std::int32_t>(os, m.base_channels);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dilations.size()));
    for (int d : m.dilations) write_le<std::int32_t>(os, d);
    write_le<std::int32_t>(os, m.rff_features);
    write_le<std::int32_t>(os, m.embed_dim);
    write_le<std::int32_t>(os, m.positional_channels);
    write_le<std::int32_t>(os, m.kernel_size);
    write_le<std::uint64_t>(os, ck.segment_len);
    write_le<double>(os, ck.sigma_data);
    write_le<std::uint64_t>(os, ck.train_step);
    write_le<std::uint64_t>(os, ck.rng_seed);
    grad::write_params(os, ck.params);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    using namespace grad::io;
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw UsageError("checkpoint: not a checkpoint file");
    const auto version = read_le<std::uint32_t>(is);
    if (version != Checkpoint::kVersion)
        throw UsageError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                         std::to_string(Checkpoint::kVersion) + ")");
    Checkpoint ck;
    auto& c = ck.model.cqt;
    c.bins_per_octave = read_le<std::int32_t>(is);
    c.octaves = read_le<std::int32_t>(is);
    c.sample_rate_hz = read_le<double>(is);
    c.f_min_hz = read_le<double>(is);
    if (read_le<std::uint8_t>(is) != 0) throw UsageError("checkpoint: unknown window kind");
    c.window = WindowKind::hann;
    auto& m = ck.model;
    m.depth = read_le<std::int32_t>(is);
    m.base_channels = read_le<std::int32_t>(is);
    const auto nd = read_le<std::uint32_t>(is);
    if (nd > 64) throw UsageError("checkpoint: implausible dilation count");
    m.dilations.resize(nd);
    for (auto& d : m.dilations) d = read_le<std::int32_t>(is);
    m.rff_features = read_le<std::int32_t>(is);
    m.embed_dim = read_le<std::int32_t>(is);
    m.positional_channels = read_le<std::int32_t>(is);
    m.kernel_size = read_le<std::int32_t>(is);
    ck.segment_len = read_le<std::uint64_t>(is);
    ck.sigma_data = read_le<double>(is);
    ck.train_step = read_le<std::uint64_t>(is);
    ck.rng_seed = read_le<std::uint64_t>(is);
    ck.params = grad::read_params<double>(is);
    m.validate();
    SigmaData{ck.sigma_data};
    return ck;
}

/// Writes to a temporary name and renames, so readers never see a partial file.
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw UsageError("checkpoint: cannot write '" + tmp + "'");
        write_checkpoint(f, ck);
        if (!f) throw UsageError("checkpoint: write failed for '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw UsageError("checkpoint: cannot rename to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("checkpoint: cannot open '" + path + "'");
    return read_checkpoint(f);
}

}  // namespace cqtdiff::app
