#include <cmath>

#include "doctest.h"
#include "edmd/diffusion.hpp"
#include "edmd/errors.hpp"
#include "edmd/gmm.hpp"
#include "edmd/rng.hpp"

using namespace edmd;

namespace {

GmmOracle make_isotropic_gaussian(int64_t d, double var) {
    Tensor cov({d, d});
    for (int64_t i = 0; i < d; ++i) cov[i * d + i] = var;
    return GmmOracle({GmmComponent{1.0, Tensor::zeros({d}), cov}});
}

GmmOracle make_four_corner_mixture(double comp_var = 0.01) {
    std::vector<GmmComponent> comps;
    const double m = 0.5;
    const double means[4][2] = {{m, m}, {-m, m}, {-m, -m}, {m, -m}};
    for (int k = 0; k < 4; ++k) {
        Tensor mean({2}, {means[k][0], means[k][1]});
        Tensor cov({2, 2}, {comp_var, 0.0, 0.0, comp_var});
        comps.push_back(GmmComponent{0.25, std::move(mean), std::move(cov)});
    }
    return GmmOracle(std::move(comps));
}

struct ConstDenoiser : Denoiser {
    Tensor value;
    explicit ConstDenoiser(Tensor v) : value(std::move(v)) {}
    Tensor denoise(const Tensor& x, double, std::span<const Condition>) const override {
        Tensor out(x.shape());
        int64_t d = x.dim(1);
        for (int64_t r = 0; r < x.dim(0); ++r) {
            for (int64_t i = 0; i < d; ++i) out[r * d + i] = value[i];
        }
        return out;
    }
};

}  // namespace

TEST_CASE("preconditioning closed forms") {
    EdmConfig cfg;
    auto c = precondition(0.5, cfg);
    CHECK(c.c_skip == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(c.c_out == doctest::Approx(0.35355339059327373).epsilon(1e-10));
    CHECK(c.c_in == doctest::Approx(1.4142135623730951).epsilon(1e-10));
    CHECK(c.c_noise == doctest::Approx(std::log(0.5) / 4.0).epsilon(1e-12));

    auto c80 = precondition(80.0, cfg);
    CHECK(c80.c_skip == doctest::Approx(3.906e-5).epsilon(1e-3));
    CHECK(c80.c_skip == doctest::Approx(0.25 / (6400.0 + 0.25)).epsilon(1e-12));

    CHECK_THROWS_AS(precondition(0.0, cfg), DomainError);
    CHECK_THROWS_AS(precondition(-1.0, cfg), DomainError);
}

TEST_CASE("dsm weighting at sigma = sigma_data") {
    EdmConfig cfg;
    CHECK(dsm_weight(0.5, cfg) == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("zero network reduces denoise to skip term") {
    EdmConfig cfg;
    SeededStream rng(3);
    Tensor x = rng.gaussian(Shape{4, 2});
    auto net = [](const Tensor& xin, double) { return Tensor::zeros(xin.shape()); };
    Tensor xhat = denoise(net, x, 2.0, cfg);
    auto c = precondition(2.0, cfg);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(xhat[i] == doctest::Approx(c.c_skip * x[i]).epsilon(1e-14));
    CHECK(same_shape(xhat.shape(), x.shape()));
}

TEST_CASE("network wired to the analytic oracle reproduces it") {
    EdmConfig cfg;
    auto oracle = make_four_corner_mixture();
    SeededStream rng(11);
    Tensor x = rng.gaussian(Shape{8, 2});
    double sigma = 0.7;
    auto c = precondition(sigma, cfg);
    auto net = [&](const Tensor& xin, double) {
        Tensor raw(xin.shape());
        for (int64_t i = 0; i < xin.size(); ++i) raw[i] = xin[i] / c.c_in;
        Tensor target = oracle.denoise(raw, sigma);
        Tensor f(xin.shape());
        for (int64_t i = 0; i < f.size(); ++i) f[i] = (target[i] - c.c_skip * raw[i]) / c.c_out;
        return f;
    };
    Tensor via_net = denoise(net, x, sigma, cfg);
    Tensor direct = oracle.denoise(x, sigma);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(std::abs(via_net[i] - direct[i]) < 1e-10);
}

TEST_CASE("score from denoiser") {
    SeededStream rng(17);
    Tensor x = rng.gaussian(Shape{5, 3});

    SUBCASE("fixed point") {
        Tensor s = score_from_denoiser(x, 1.3, x);
        for (int64_t i = 0; i < s.size(); ++i) CHECK(s[i] == 0.0);
    }

    SUBCASE("gaussian marginal score") {
        double s2 = 0.8;  // data variance
        double sigma = 0.6;
        auto oracle = make_isotropic_gaussian(3, s2);
        Tensor xhat = oracle.denoise(x, sigma);
        Tensor score = score_from_denoiser(x, sigma, xhat);
        for (int64_t i = 0; i < x.size(); ++i) {
            CHECK(score[i] == doctest::Approx(-x[i] / (s2 + sigma * sigma)).epsilon(1e-10));
        }
    }

    SUBCASE("affine in xhat") {
        Tensor xh1 = rng.gaussian(Shape{5, 3});
        Tensor xh2 = rng.gaussian(Shape{5, 3});
        double a = 0.3;
        Tensor mix(xh1.shape());
        for (int64_t i = 0; i < mix.size(); ++i) mix[i] = a * xh1[i] + (1 - a) * xh2[i];
        Tensor s_mix = score_from_denoiser(x, 0.9, mix);
        Tensor s1 = score_from_denoiser(x, 0.9, xh1);
        Tensor s2t = score_from_denoiser(x, 0.9, xh2);
        for (int64_t i = 0; i < mix.size(); ++i) {
            CHECK(s_mix[i] == doctest::Approx(a * s1[i] + (1 - a) * s2t[i]).epsilon(1e-12));
        }
    }

    SUBCASE("domain errors") {
        CHECK_THROWS_AS(score_from_denoiser(x, 0.0, x), DomainError);
        CHECK_THROWS_AS(drift_from_denoiser(x, -2.0, x), DomainError);
    }
}

TEST_CASE("score consistency on the mixture at random points") {
    auto oracle = make_four_corner_mixture();
    SeededStream rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = rng.gaussian(Shape{1, 2});
        double sigma = std::exp(rng.gaussian() * 1.2 - 0.3);
        Tensor xhat = oracle.denoise(x, sigma);
        Tensor via_denoiser = score_from_denoiser(x, sigma, xhat);
        Tensor exact = oracle.score(x, sigma);
        for (int64_t i = 0; i < 2; ++i) {
            CHECK(std::abs(via_denoiser[i] - exact[i]) < 1e-10);
        }
    }
}

TEST_CASE("dsm loss") {
    EdmConfig cfg;
    SeededStream rng(31);

    SUBCASE("perfect constant denoiser on point mass") {
        Tensor m = Tensor::from({0.3, -0.7});
        Tensor x_real({16, 2});
        for (int64_t r = 0; r < 16; ++r) {
            x_real[r * 2] = m[0];
            x_real[r * 2 + 1] = m[1];
        }
        ConstDenoiser d(m);
        Tensor eps = rng.gaussian(Shape{16, 2});
        CHECK(dsm_loss(d, x_real, 0.5, eps, cfg) == doctest::Approx(0.0));
    }

    SUBCASE("monte-carlo loss of the optimal denoiser matches the analytic minimum") {
        const int64_t n = 10000;
        const int64_t d = 2;
        auto oracle = make_isotropic_gaussian(d, 1.0);
        GmmDenoiser den(oracle);
        double sigma = 0.8;
        Tensor x = rng.gaussian(Shape{n, d});
        Tensor eps = rng.gaussian(Shape{n, d});
        double lam = dsm_weight(sigma, cfg);
        // Per-sample losses for a standard-error estimate.
        Tensor noisy(x.shape());
        for (int64_t i = 0; i < x.size(); ++i) noisy[i] = x[i] + sigma * eps[i];
        Tensor xhat = den.denoise(noisy, sigma, {});
        double mean_loss = 0.0, m2 = 0.0;
        for (int64_t r = 0; r < n; ++r) {
            double l = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                double diff = x[r * d + j] - xhat[r * d + j];
                l += diff * diff;
            }
            l *= lam;
            double delta = l - mean_loss;
            mean_loss += delta / static_cast<double>(r + 1);
            m2 += delta * (l - mean_loss);
        }
        double se = std::sqrt(m2 / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
        double s2 = sigma * sigma;
        double analytic = lam * static_cast<double>(d) * s2 / (1.0 + s2);
        CHECK(std::abs(mean_loss - analytic) < 3.0 * se);
        // And the batch API agrees with the hand-rolled mean.
        CHECK(dsm_loss(den, x, sigma, eps, cfg) == doctest::Approx(mean_loss).epsilon(1e-9));
    }
}

TEST_CASE("sigma sampling") {
    EdmConfig cfg;

    SUBCASE("lognormal median and positivity") {
        auto dist = NoiseDistribution::train_lognormal(cfg);
        SeededStream rng(555);
        const int64_t n = 100000;
        std::vector<double> draws(n);
        bool all_positive = true;
        for (auto& v : draws) {
            v = sample_sigma(dist, rng);
            all_positive &= (v > 0);
        }
        CHECK(all_positive);
        std::nth_element(draws.begin(), draws.begin() + n / 2, draws.end());
        double median = draws[static_cast<size_t>(n / 2)];
        CHECK(median == doctest::Approx(std::exp(-0.4)).epsilon(0.02));
    }

    SUBCASE("continuous inference draws stay in range") {
        auto dist = NoiseDistribution::inference_power(cfg, 7.0);
        SeededStream rng(556);
        for (int i = 0; i < 2000; ++i) {
            double s = sample_sigma(dist, rng);
            CHECK(s >= cfg.sigma_min);
            CHECK(s <= cfg.sigma_max);
        }
    }

    SUBCASE("singleton discrete list") {
        auto dist = NoiseDistribution::discrete_levels({80.0});
        SeededStream rng(557);
        for (int i = 0; i < 10; ++i) CHECK(sample_sigma(dist, rng) == 80.0);
    }

    SUBCASE("training mass concentrates at mid-to-high snr") {
        auto dist = NoiseDistribution::train_lognormal(cfg);
        SeededStream rng(558);
        int above0 = 0, beneath20 = 0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            double db = snr_db(sample_sigma(dist, rng));
            if (db > 0) ++above0;
            if (db < -20) ++beneath20;
        }
        CHECK(above0 > beneath20);
    }
}

TEST_CASE("inference schedule") {
    SUBCASE("endpoints are bit-exact for all N >= 2") {
        for (int n : {2, 3, 4, 7, 40, 640}) {
            for (double rho : {1.0, 3.0, 7.0, 1000.0}) {
                auto s = inference_schedule(n, rho, 0.002, 80.0);
                CHECK(s.front() == 80.0);
                CHECK(s.back() == 0.002);
                for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] < s[i - 1]);
            }
        }
        CHECK(inference_schedule(1, 7.0, 0.002, 80.0) == std::vector<double>{80.0});
    }

    SUBCASE("N=4 rho=7 interior levels") {
        auto s = inference_schedule(4, 7.0, 0.002, 80.0);
        CHECK(s[1] == doctest::Approx(9.72).epsilon(0.01));
        CHECK(s[2] == doctest::Approx(0.470).epsilon(0.01));
    }

    SUBCASE("rho=1 is linear interpolation") {
        auto s = inference_schedule(5, 1.0, 0.002, 80.0);
        for (int i = 0; i < 5; ++i) {
            double expect = 80.0 + (0.002 - 80.0) * static_cast<double>(i) / 4.0;
            CHECK(s[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-12));
        }
    }

    SUBCASE("raising rho lowers every interior level") {
        auto lo = inference_schedule(6, 3.0, 0.002, 80.0);
        auto hi = inference_schedule(6, 9.0, 0.002, 80.0);
        for (size_t i = 1; i + 1 < lo.size(); ++i) CHECK(hi[i] < lo[i]);
    }

    SUBCASE("domain errors") {
        CHECK_THROWS_AS(inference_schedule(4, 0.5, 0.002, 80.0), DomainError);
        CHECK_THROWS_AS(inference_schedule(0, 7.0, 0.002, 80.0), DomainError);
    }
}

TEST_CASE("guided denoising") {
    auto oracle = make_four_corner_mixture();
    GmmDenoiser d(oracle);
    SeededStream rng(77);
    Tensor x = rng.gaussian(Shape{6, 2});
    std::vector<Condition> cond(6);
    for (int i = 0; i < 6; ++i) cond[static_cast<size_t>(i)] = Condition{i % 4, 0};
    double sigma = 0.9;

    SUBCASE("identity weights") {
        GuidanceConfig g1{GuidanceMode::Cfg, 1.0};
        Tensor guided = guided_denoise(d, x, sigma, cond, g1);
        Tensor direct = d.denoise(x, sigma, cond);
        CHECK(bitwise_equal(guided, direct));

        GuidanceConfig g0{GuidanceMode::Cfg, 0.0};
        std::vector<Condition> nulls(6);
        Tensor uncond = d.denoise(x, sigma, nulls);
        CHECK(bitwise_equal(guided_denoise(d, x, sigma, cond, g0), uncond));
    }

    SUBCASE("affine combination at arbitrary weight") {
        struct ToyDenoiser : Denoiser {
            Tensor denoise(const Tensor& x, double, std::span<const Condition> c) const override {
                double v = (!c.empty() && c[0].category != kNullCategory) ? 2.0 : 1.0;
                return Tensor::full(x.shape(), v);
            }
        } toy;
        std::vector<Condition> e{Condition{1, 0}};
        Tensor xs({1, 1}, {0.0});
        GuidanceConfig g{GuidanceMode::Cfg, 4.5};
        Tensor out = guided_denoise(toy, xs, 1.0, e, g);
        CHECK(out[0] == doctest::Approx(5.5).epsilon(1e-12));
    }

    SUBCASE("affine identity for random weights") {
        SeededStream wrng(78);
        for (int t = 0; t < 10; ++t) {
            double w = wrng.uniform() * 6.0;
            GuidanceConfig g{GuidanceMode::Cfg, w};
            auto pair = guided_denoise_pair(d, x, sigma, cond, g);
            Tensor ce = d.denoise(x, sigma, cond);
            for (int64_t i = 0; i < x.size(); ++i) {
                double expect = pair.uncond[i] + w * (ce[i] - pair.uncond[i]);
                CHECK(pair.guided[i] == doctest::Approx(expect).epsilon(1e-9));
            }
        }
    }

    SUBCASE("cfg++ weight domain") {
        GuidanceConfig bad{GuidanceMode::CfgPlusPlus, 1.5};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        GuidanceConfig ok{GuidanceMode::CfgPlusPlus, 0.8};
        CHECK_NOTHROW(ok.validate());
    }
}

TEST_CASE("snr in decibels") {
    CHECK(snr_db(1.0) == doctest::Approx(0.0));
    CHECK(snr_db(0.1) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(snr_db(80.0) == doctest::Approx(-38.0618).epsilon(1e-4));
    CHECK_THROWS_AS(snr_db(0.0), DomainError);
}

TEST_CASE("gmm oracle closed forms") {
    SeededStream rng(91);

    SUBCASE("single gaussian shrinkage") {
        double s2 = 0.64;
        auto oracle = make_isotropic_gaussian(2, s2);
        Tensor x = rng.gaussian(Shape{5, 2});
        double sigma = 1.1;
        Tensor xhat = oracle.denoise(x, sigma);
        double shrink = s2 / (s2 + sigma * sigma);
        for (int64_t i = 0; i < x.size(); ++i) CHECK(xhat[i] == doctest::Approx(shrink * x[i]).epsilon(1e-12));
    }

    SUBCASE("small-noise limit approaches identity") {
        auto oracle = make_four_corner_mixture();
        Tensor x = oracle.sample(8, rng);
        Tensor xhat = oracle.denoise(x, 1e-6);
        for (int64_t r = 0; r < 8; ++r) {
            double err = 0.0;
            for (int64_t j = 0; j < 2; ++j) {
                double diff = xhat[r * 2 + j] - x[r * 2 + j];
                err += diff * diff;
            }
            CHECK(std::sqrt(err) < 1e-4);
        }
    }

    SUBCASE("large-noise limit approaches the mixture mean") {
        auto oracle = make_four_corner_mixture();
        Tensor mean = oracle.mixture_mean();
        Tensor x = rng.gaussian(Shape{4, 2});
        Tensor xhat = oracle.denoise(x, 1e3);
        for (int64_t r = 0; r < 4; ++r) {
            for (int64_t j = 0; j < 2; ++j) {
                CHECK(std::abs(xhat[r * 2 + j] - mean[j]) < 1e-3);
            }
        }
    }

    SUBCASE("invalid mixtures are rejected") {
        Tensor cov({2, 2}, {1.0, 0.0, 0.0, 1.0});
        CHECK_THROWS_AS(GmmOracle({GmmComponent{0.5, Tensor::zeros({2}), cov}}), ConfigError);
        Tensor bad_cov({2, 2}, {1.0, 2.0, 2.0, 1.0});  // not PSD
        CHECK_THROWS_AS(GmmOracle({GmmComponent{1.0, Tensor::zeros({2}), bad_cov}}), NumericError);
    }
}
