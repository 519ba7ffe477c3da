#include "cqtdiff/params.hpp"
#include "fd_check.hpp"

#include <catch_amalgamated.hpp>
#include <sstream>

using namespace cqtdiff;
using namespace cqtdiff::grad;
using namespace testing_support;

namespace {

constexpr int kConfigs = 20;
constexpr double kTol = 1e-5;

}  // namespace

TEST_CASE("elementwise primitives match finite differences") {
    for (int c = 0; c < kConfigs; ++c) {
        Dims d(c);
        const Shape s{d.pick(1, 4), d.pick(1, 5), d.pick(1, 6)};
        const auto a = randt(s, 10 + c), b = randt(s, 20 + c);
        CHECK(fd_check([](auto&, const auto& v) { return add(v[0], v[1]); }, {a, b}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return sub(v[0], v[1]); }, {a, b}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return mul(v[0], v[1]); }, {a, b}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return scale(v[0], -1.7); }, {a}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return gelu(v[0]); }, {randt(s, 30 + c, 2.0)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return sum_squares(v[0]); }, {a}, c) < kTol);
        // clip: keep samples at least 1e-3 away from the threshold
        auto x = randt(s, 40 + c);
        for (auto& v : x.data)
            if (std::abs(std::abs(v) - 0.5) < 1e-3) v += 0.01;
        CHECK(fd_check([](auto&, const auto& v) { return clip(v[0], 0.5); }, {x}, c) < kTol);
    }
}

TEST_CASE("dense primitives match finite differences") {
    for (int c = 0; c < kConfigs; ++c) {
        Dims d(100 + c);
        const std::size_t m = d.pick(1, 6), k = d.pick(1, 7), n = d.pick(1, 5);
        CHECK(fd_check([](auto&, const auto& v) { return matmul(v[0], v[1]); }, {randt({m, k}, c), randt({k, n}, c + 1)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return linear(v[0], v[1], v[2]); },
                       {randt({k}, c + 2), randt({m, k}, c + 3), randt({m}, c + 4)}, c) < kTol);
    }
}

TEST_CASE("spectrogram primitives match finite differences") {
    for (int c = 0; c < kConfigs; ++c) {
        Dims d(200 + c);
        const std::size_t C = d.pick(1, 3), F = d.pick(1, 9), T = 2 * d.pick(1, 6);
        const std::size_t Cout = d.pick(1, 3), K = 2 * d.pick(0, 2) + 1;
        const int dil = static_cast<int>(d.pick(1, 4));
        const auto x = randt({C, F, T}, c);
        CHECK(fd_check([dil](auto&, const auto& v) { return conv1d_freq(v[0], v[1], dil); }, {x, randt({Cout, C, K}, c + 1)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return film(v[0], v[1], v[2]); }, {x, randt({C}, c + 2), randt({C}, c + 3)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return concat_channels<double>({v[0], v[1]}); }, {x, randt({Cout, F, T}, c + 4)}, c) <
              kTol);
        CHECK(fd_check([](auto&, const auto& v) { return complex_unpack(v[0]); }, {randt({F, T, 2}, c + 5)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return complex_pack(v[0]); }, {randt({2, F, T}, c + 6)}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return downsample_time(v[0]); }, {x}, c) < kTol);
        CHECK(fd_check([](auto&, const auto& v) { return upsample_time(v[0]); }, {x}, c) < kTol);
    }
}

TEST_CASE("fft_linear primitives match finite differences") {
    for (int c = 0; c < kConfigs; ++c) {
        Dims d(300 + c);
        CqtConfig cc;
        cc.bins_per_octave = static_cast<int>(d.pick(1, 4));
        cc.octaves = static_cast<int>(d.pick(1, 3));
        const std::size_t L = std::size_t{64} << d.pick(0, 3);
        const auto plan = build_plan(cc, L);
        CHECK(fd_check([&plan](auto&, const auto& v) { return cqt_forward(v[0], plan); }, {randt({L}, c)}, c) < kTol);
        CHECK(fd_check([&plan](auto&, const auto& v) { return cqt_inverse(v[0], plan); }, {randt({plan.band_count(), plan.frames, 2}, c)},
                       c) < kTol);
    }
}

TEST_CASE("primitive identities") {
    Tape<double> t;
    CHECK(gelu(t.constant(Tensor<double>({3}, 0.0))).value().data == Tensor<double>({3}).data);

    const auto x = randt({2, 7, 4}, 1);
    Tensor<double> w({2, 2, 3});
    w.data[0 * 6 + 0 * 3 + 1] = 1.0;  // out 0 <- in 0, center tap
    w.data[1 * 6 + 1 * 3 + 1] = 1.0;
    for (int dil : {1, 3}) CHECK(conv1d_freq(t.constant(x), t.constant(w), dil).value().data == x.data);

    CHECK_THROWS_AS(conv1d_freq(t.constant(x), t.constant(w), 0), UsageError);
    CHECK_THROWS_AS(conv1d_freq(t.constant(x), t.constant(Tensor<double>({2, 2, 2})), 1), UsageError);
    CHECK_THROWS_AS(downsample_time(t.constant(x), 3), UsageError);
    CHECK_THROWS_AS(add(t.constant(x), t.constant(randt({2, 7, 5}, 2))), UsageError);
    CHECK_THROWS_AS(matmul(t.constant(randt({2, 3}, 1)), t.constant(randt({2, 3}, 1))), UsageError);
}

TEST_CASE("downsampling keeps low frequencies and DC") {
    Tape<double> t;
    Tensor<double> x({1, 1, 64});
    for (std::size_t i = 0; i < 64; ++i) x[i] = 1.0;
    const auto y = downsample_time(t.constant(x)).value();
    for (std::size_t i = 4; i < 28; ++i) CHECK(std::abs(y[i] - 1.0) < 1e-12);
    const auto u = upsample_time(t.constant(y)).value();
    // the two output phases sum different tap subsets; the mismatch is the passband ripple
    for (std::size_t i = 16; i < 48; ++i) CHECK(std::abs(u[i] - 1.0) < 1e-3);
}

TEST_CASE("backward of <x, x> is 2x") {
    Tape<double> t;
    const auto x0 = randt({5}, 3);
    auto x = t.leaf(x0);
    auto g = t.backward(sum_squares(x), Tensor<double>({1}, 1.0));
    for (std::size_t i = 0; i < 5; ++i) CHECK(g.wrt(x)[i] == 2.0 * x0[i]);
}

TEST_CASE("backward through the forward CQT is adjoint_forward of the seed") {
    CqtConfig cc;
    cc.bins_per_octave = 12;
    const auto plan = build_plan(cc, 4096);
    Tape<double> t;
    auto x = t.leaf(randt({4096}, 5));
    auto s = cqt_forward(x, plan);
    const auto seed = randt(s.shape(), 6);
    auto g = t.backward(s, seed);
    const auto expect = adjoint_forward(plan, cqtdiff::grad::detail::tensor_to_spectrogram(plan, seed));
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(g.wrt(x)[i] == expect[i]);
}

TEST_CASE("backward is linear in the seed") {
    auto run = [](const Tensor<double>& seed) {
        Tape<double> t;
        auto x = t.leaf(randt({3, 5, 4}, 1));
        auto w = t.leaf(randt({2, 3, 3}, 2));
        auto y = gelu(conv1d_freq(x, w, 2));
        auto g = t.backward(y, seed);
        return g.wrt(x).data;
    };
    const auto s1 = randt({2, 5, 4}, 10), s2 = randt({2, 5, 4}, 11);
    Tensor<double> s12 = s1;
    axpy(1.0, s2, s12);
    const auto g1 = run(s1), g2 = run(s2), g12 = run(s12);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g12[i] - g1[i] - g2[i]) <= 1e-12 * (1 + std::abs(g12[i])));
}

TEST_CASE("backward errors") {
    Tape<double> t;
    auto x = t.leaf(randt({4}, 1));
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(t.backward(y, Tensor<double>({5})), UsageError);
    t.backward(y, Tensor<double>({4}, 1.0));
    CHECK_THROWS_WITH(t.backward(y, Tensor<double>({4}, 1.0)), Catch::Matchers::ContainsSubstring("already consumed"));
    Tape<double> other;
    CHECK_THROWS_AS(add(x, other.leaf(randt({4}, 2))), UsageError);
}

TEST_CASE("recording a graph leaves parameters untouched") {
    ParamStore<double> p;
    p.add("w", randt({2, 3, 3}, 1));
    p.add("frozen", randt({4}, 2), false);
    const ParamStore<double> before = p;
    {
        Tape<double> t;
        auto y = conv1d_freq(t.constant(randt({3, 6, 4}, 3)), p.var(t, "w"), 1);
        auto g = t.backward(y, randt(y.shape(), 4));
        CHECK(g.params.count("w") == 1);
        CHECK(g.params.count("frozen") == 0);
    }
    CHECK(p == before);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamStore<double> p;
    p.add("a", randt({7}, 1));
    const auto before = p.get("a").data;
    adam_step(p, {{"a", Tensor<double>({7})}});
    CHECK(p.get("a").data == before);
    CHECK(p.step() == 1);
}

TEST_CASE("adam: first step moves each element by lr") {
    ParamStore<double> p;
    p.add("a", randt({9}, 2));
    const auto before = p.get("a").data;
    const auto g = randt({9}, 3, 5.0);
    AdamConfig cfg;
    cfg.lr = 1e-3;
    adam_step(p, {{"a", g}}, cfg);
    for (std::size_t i = 0; i < 9; ++i) {
        const double step = before[i] - p.get("a")[i];
        CHECK(std::abs(std::abs(step) - cfg.lr) < 1e-8);
        CHECK((step > 0) == (g[i] > 0));
    }
}

TEST_CASE("adam: missing gradient is an error") {
    ParamStore<double> p;
    p.add("a", randt({2}, 1));
    p.add("b", randt({2}, 2));
    CHECK_THROWS_AS(adam_step(p, {{"a", Tensor<double>({2})}}), UsageError);
}

TEST_CASE("adam: convex quadratic decreases monotonically after warmup") {
    // f(w) = 0.5 * sum_i k_i (w_i - t_i)^2
    const std::vector<double> k = {1.0, 4.0, 0.25}, target = {0.3, -0.2, 0.9};
    ParamStore<double> p;
    p.add("w", Tensor<double>({3}, std::vector<double>{2.0, 1.5, -1.0}));
    AdamConfig cfg;
    cfg.lr = 0.01;
    auto f = [&] {
        double s = 0;
        for (int i = 0; i < 3; ++i) s += 0.5 * k[i] * std::pow(p.get("w")[i] - target[i], 2);
        return s;
    };
    std::vector<double> vals;
    for (int it = 0; it < 100; ++it) {
        Tensor<double> g({3});
        for (int i = 0; i < 3; ++i) g[i] = k[i] * (p.get("w")[i] - target[i]);
        adam_step(p, {{"w", g}}, cfg);
        vals.push_back(f());
    }
    for (std::size_t i = 10; i < vals.size(); ++i) CHECK(vals[i] < vals[i - 1]);
    CHECK(vals.back() < 0.5 * vals.front());
}

TEST_CASE("parameter container round trip") {
    ParamStore<double> p;
    p.add("conv.w", randt({2, 3, 3}, 1));
    p.add("rff", randt({4}, 2), false);
    adam_step(p, {{"conv.w", randt({2, 3, 3}, 3)}});
    std::stringstream ss;
    write_params(ss, p);
    const auto q = read_params<double>(ss);
    CHECK(q == p);

    std::stringstream bad("NOTPARAMS.......");
    CHECK_THROWS_AS(read_params<double>(bad), UsageError);
    std::string blob;
    {
        std::stringstream s2;
        write_params(s2, p);
        blob = s2.str();
    }
    std::stringstream truncated(blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(read_params<double>(truncated), UsageError);
    blob[8] = 9;  // version
    std::stringstream versioned(blob);
    CHECK_THROWS_AS(read_params<double>(versioned), UsageError);
}

TEST_CASE("single precision gradients agree with double to 1e-2") {
    const auto x = randt({2, 6, 8}, 1), w = randt({3, 2, 3}, 2);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        Tape<T> t;
        auto xv = t.leaf(x.template cast<T>());
        auto y = sum_squares(gelu(downsample_time(conv1d_freq(xv, t.constant(w.template cast<T>()), 2))));
        const auto g = t.backward(y, Tensor<T>({1}, T(1))).wrt(xv).template cast<double>();
        return std::vector<double>(g.data.begin(), g.data.end());
    };
    const auto gd = run(double{}), gf = run(float{});
    CHECK(rel_l2(gf, gd) < 1e-2);
}
