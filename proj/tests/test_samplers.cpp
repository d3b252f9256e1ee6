#include <cmath>

#include "doctest.h"
#include "edmd/errors.hpp"
#include "edmd/gmm.hpp"
#include "edmd/metrics.hpp"
#include "edmd/samplers.hpp"

using namespace edmd;

namespace {

GmmOracle standard_gaussian(int64_t d) {
    Tensor cov({d, d});
    for (int64_t i = 0; i < d; ++i) cov[i * d + i] = 1.0;
    return GmmOracle({GmmComponent{1.0, Tensor::zeros({d}), cov}});
}

struct PointMassDenoiser : Denoiser {
    Tensor m;
    explicit PointMassDenoiser(Tensor mean) : m(std::move(mean)) {}
    Tensor denoise(const Tensor& x, double, std::span<const Condition>) const override {
        Tensor out(x.shape());
        int64_t d = x.dim(1);
        for (int64_t r = 0; r < x.dim(0); ++r) {
            for (int64_t j = 0; j < d; ++j) out[r * d + j] = m[j];
        }
        return out;
    }
};

std::vector<Condition> uncond(int64_t n) {
    return std::vector<Condition>(static_cast<size_t>(n), Condition{kNullCategory, 0});
}

}  // namespace

TEST_CASE("single euler step on a point mass") {
    EdmConfig edm;
    PointMassDenoiser den(Tensor::from({0.4, -0.2}));
    SamplerConfig cfg;
    cfg.kind = SamplerKind::Euler;
    cfg.steps = 1;
    cfg.seed = 5;
    auto cond = uncond(6);
    Trajectory traj;
    Tensor out = ode_sample(den, cfg, edm, 2, cond, &traj);
    REQUIRE(traj.states.size() == 2);  // N + 1 entries
    CHECK(traj.sigmas[0] == 80.0);
    const Tensor& x0 = traj.states[0];
    for (int64_t r = 0; r < 6; ++r) {
        for (int64_t j = 0; j < 2; ++j) {
            // One first-order step from sigma_max collapses onto the mass up
            // to O(sigma_min / sigma_max).
            double formula = x0[r * 2 + j] + (edm.sigma_min - edm.sigma_max) * (x0[r * 2 + j] - den.m[j]) / edm.sigma_max;
            CHECK(std::abs(out[r * 2 + j] - den.m[j]) < 1e-3 * std::max(1.0, std::abs(x0[r * 2 + j])));
            CHECK(std::abs(out[r * 2 + j] - formula) < 1e-3 * std::max(1.0, std::abs(x0[r * 2 + j])));
        }
    }
}

TEST_CASE("heun sampling reproduces the gaussian marginal") {
    EdmConfig edm;
    auto oracle = standard_gaussian(2);
    GmmDenoiser den(oracle);
    SamplerConfig cfg;
    cfg.kind = SamplerKind::Heun;
    cfg.steps = 40;
    cfg.seed = 11;
    const int64_t n = 4096;
    auto cond = uncond(n);
    Tensor out = ode_sample(den, cfg, edm, 2, cond);
    Tensor mu = sample_mean(out);
    Tensor cov = sample_cov(out);
    double se_mean = 3.0 / std::sqrt(static_cast<double>(n));
    double se_cov_diag = 3.0 * std::sqrt(2.0 / static_cast<double>(n));
    double se_cov_off = 3.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mu[0]) < se_mean);
    CHECK(std::abs(mu[1]) < se_mean);
    CHECK(std::abs(cov[0] - 1.0) < se_cov_diag);
    CHECK(std::abs(cov[3] - 1.0) < se_cov_diag);
    CHECK(std::abs(cov[1]) < se_cov_off);
}

TEST_CASE("heun terminal error shrinks about 4x per step doubling") {
    EdmConfig edm;
    auto oracle = standard_gaussian(2);
    GmmDenoiser den(oracle);
    const int64_t n = 64;
    auto cond = uncond(n);
    auto run = [&](int steps) {
        SamplerConfig cfg;
        cfg.kind = SamplerKind::Heun;
        cfg.steps = steps;
        cfg.seed = 21;
        return ode_sample(den, cfg, edm, 2, cond);
    };
    Tensor ref = run(640);
    auto err = [&](const Tensor& x) {
        double acc = 0.0;
        for (int64_t i = 0; i < x.size(); ++i) acc += (x[i] - ref[i]) * (x[i] - ref[i]);
        return std::sqrt(acc / static_cast<double>(x.size()));
    };
    double e10 = err(run(10));
    double e20 = err(run(20));
    double e40 = err(run(40));
    CHECK(e10 / e20 == doctest::Approx(4.0).epsilon(0.5));
    CHECK(e20 / e40 == doctest::Approx(4.0).epsilon(0.5));
}

TEST_CASE("dpm2s agrees with heun statistics and degenerates at one step") {
    EdmConfig edm;
    auto oracle = standard_gaussian(2);
    GmmDenoiser den(oracle);
    const int64_t n = 4096;
    auto cond = uncond(n);

    SamplerConfig heun_cfg;
    heun_cfg.kind = SamplerKind::Heun;
    heun_cfg.steps = 40;
    heun_cfg.seed = 31;
    Tensor a = ode_sample(den, heun_cfg, edm, 2, cond);

    SamplerConfig dpm_cfg = heun_cfg;
    dpm_cfg.kind = SamplerKind::Dpm2S;
    Tensor b = dpm2s_sample(den, dpm_cfg, edm, 2, cond);

    Tensor mu_a = sample_mean(a), mu_b = sample_mean(b);
    Tensor cov_a = sample_cov(a), cov_b = sample_cov(b);
    double se_mean = 3.0 / std::sqrt(static_cast<double>(n));
    double se_cov = 3.0 * std::sqrt(2.0 / static_cast<double>(n));
    for (int64_t j = 0; j < 2; ++j) CHECK(std::abs(mu_a[j] - mu_b[j]) < se_mean);
    for (int64_t j = 0; j < 4; ++j) CHECK(std::abs(cov_a[j] - cov_b[j]) < se_cov);

    SUBCASE("single step is one denoiser evaluation") {
        SamplerConfig one = dpm_cfg;
        one.steps = 1;
        Trajectory traj;
        Tensor out = dpm2s_sample(den, one, edm, 2, cond, &traj);
        REQUIRE(traj.states.size() == 2);
        Tensor expect = den.denoise(traj.states[0], 80.0, cond);
        CHECK(bitwise_equal(out, expect));
    }

    SUBCASE("deterministic under fixed seed") {
        Tensor again = dpm2s_sample(den, dpm_cfg, edm, 2, cond);
        CHECK(bitwise_equal(again, b));
    }
}

TEST_CASE("cfg++ renoises along the unconditional prediction") {
    struct SplitDenoiser : Denoiser {
        Tensor denoise(const Tensor& x, double, std::span<const Condition> c) const override {
            double v = (!c.empty() && c[0].category != kNullCategory) ? 2.0 : 1.0;
            return Tensor::full(x.shape(), v);
        }
    } den;
    EdmConfig edm;
    SamplerConfig cfg;
    cfg.kind = SamplerKind::Euler;
    cfg.steps = 2;
    cfg.seed = 41;
    cfg.guidance = GuidanceConfig{GuidanceMode::CfgPlusPlus, 0.8};
    std::vector<Condition> cond{Condition{1, 0}};
    Trajectory traj;
    Tensor out = ode_sample(den, cfg, edm, 1, cond, &traj);
    REQUIRE(traj.states.size() == 3);
    // Step 1: x1 = guided + (s1/s0) * (x0 - uncond) with guided = 1.8, uncond = 1.
    double s0 = traj.sigmas[0], s1 = traj.sigmas[1];
    double x0 = traj.states[0][0];
    double expect1 = 1.8 + (s1 / s0) * (x0 - 1.0);
    CHECK(traj.states[1][0] == doctest::Approx(expect1).epsilon(1e-12));
    // Terminal step to sigma = 0 returns the guided prediction.
    CHECK(out[0] == doctest::Approx(1.8).epsilon(1e-12));
}

TEST_CASE("ping-pong sampling") {
    EdmConfig edm;

    SUBCASE("one step is a single generator call") {
        auto oracle = standard_gaussian(2);
        GmmDenoiser gen(oracle);
        SamplerConfig cfg;
        cfg.kind = SamplerKind::PingPong;
        cfg.steps = 1;
        cfg.seed = 51;
        auto cond = uncond(8);
        Trajectory traj;
        Tensor out = ping_pong_sample(gen, cfg, edm, 2, cond, &traj);
        Tensor expect = gen.denoise(traj.states[0], 80.0, cond);
        CHECK(bitwise_equal(out, expect));
    }

    SUBCASE("ideal point-mass generator is a fixed point") {
        PointMassDenoiser gen(Tensor::from({-0.1, 0.6}));
        for (int steps : {1, 2, 4, 8}) {
            SamplerConfig cfg;
            cfg.kind = SamplerKind::PingPong;
            cfg.steps = steps;
            cfg.seed = 52;
            auto cond = uncond(4);
            Tensor out = ping_pong_sample(gen, cfg, edm, 2, cond);
            for (int64_t r = 0; r < 4; ++r) {
                CHECK(out[r * 2] == doctest::Approx(-0.1));
                CHECK(out[r * 2 + 1] == doctest::Approx(0.6));
            }
        }
    }

    SUBCASE("renoise levels follow the schedule tail") {
        auto oracle = standard_gaussian(2);
        GmmDenoiser gen(oracle);
        SamplerConfig cfg;
        cfg.kind = SamplerKind::PingPong;
        cfg.steps = 4;
        cfg.seed = 53;
        auto cond = uncond(2);
        Trajectory traj;
        ping_pong_sample(gen, cfg, edm, 2, cond, &traj);
        auto levels = inference_schedule(4, cfg.rho, edm.sigma_min, edm.sigma_max);
        REQUIRE(traj.sigmas.size() == 5);
        for (size_t i = 0; i < 4; ++i) CHECK(traj.sigmas[i] == levels[i]);
        CHECK(traj.sigmas[4] == 0.0);
    }
}

TEST_CASE("more steps improve marginal fit for every sampler") {
    EdmConfig edm;
    auto oracle = standard_gaussian(2);
    GmmDenoiser den(oracle);
    const int64_t n = 2048;
    auto cond = uncond(n);
    Tensor eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor zero({2});
    for (auto kind : {SamplerKind::Euler, SamplerKind::Heun, SamplerKind::Dpm2S, SamplerKind::PingPong}) {
        std::vector<double> fg;
        for (int steps : {1, 8, 16, 40}) {
            SamplerConfig cfg;
            cfg.kind = kind;
            cfg.steps = steps;
            cfg.seed = 61;
            Tensor out = sample(den, cfg, edm, 2, cond);
            fg.push_back(frechet_gauss_to_moments(out, zero, eye));
        }
        CAPTURE(to_string(kind));
        for (size_t i = 1; i < fg.size(); ++i) CHECK(fg[i] < fg[i - 1] * 1.1 + 1e-3);
        CHECK(fg.back() < fg.front());
    }
}

TEST_CASE("sampler config validation") {
    SamplerConfig cfg;
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.steps = 4;
    cfg.rho = 0.2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(sampler_kind_from_string("heun") == SamplerKind::Heun);
    CHECK_THROWS_AS(sampler_kind_from_string("nope"), ConfigError);
}

TEST_CASE("non-finite states are reported with the noise level") {
    struct ExplodingDenoiser : Denoiser {
        Tensor denoise(const Tensor& x, double, std::span<const Condition>) const override {
            return Tensor::full(x.shape(), std::nan(""));
        }
    } den;
    EdmConfig edm;
    SamplerConfig cfg;
    cfg.kind = SamplerKind::Euler;
    cfg.steps = 4;
    auto cond = uncond(2);
    CHECK_THROWS_AS(ode_sample(den, cfg, edm, 2, cond), NumericError);
}
