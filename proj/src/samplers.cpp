#include "edmd/samplers.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

std::string to_string(SamplerKind kind) {
    switch (kind) {
        case SamplerKind::Euler: return "euler";
        case SamplerKind::Heun: return "heun";
        case SamplerKind::Dpm2S: return "dpm2s";
        case SamplerKind::PingPong: return "ping_pong";
    }
    return "unknown";
}

SamplerKind sampler_kind_from_string(const std::string& name) {
    if (name == "euler") return SamplerKind::Euler;
    if (name == "heun") return SamplerKind::Heun;
    if (name == "dpm2s") return SamplerKind::Dpm2S;
    if (name == "ping_pong" || name == "pingpong") return SamplerKind::PingPong;
    throw ConfigError("unknown sampler '" + name + "'");
}

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler.steps must be >= 1");
    if (rho < 1.0) throw ConfigError("sampler.rho must be >= 1");
    guidance.validate();
}

namespace {

void check_state(const Tensor& x, double sigma) {
    if (!x.all_finite()) {
        throw NumericError("sampler: non-finite state at sigma = " + std::to_string(sigma));
    }
}

Tensor initial_noise(uint64_t seed, int64_t n, int64_t dim, double sigma_max) {
    Tensor x({n, dim});
    SeededStream root(seed);
    for (int64_t i = 0; i < n; ++i) {
        SeededStream per_sample = root.child(static_cast<uint64_t>(i));
        for (int64_t j = 0; j < dim; ++j) x[i * dim + j] = sigma_max * per_sample.gaussian();
    }
    return x;
}

void record(Trajectory* traj, double sigma, const Tensor& x) {
    if (!traj) return;
    traj->sigmas.push_back(sigma);
    traj->states.push_back(x);
}

}  // namespace

Tensor ode_sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                  std::span<const Condition> cond, Trajectory* trajectory) {
    cfg.validate();
    NoGradGuard guard;
    const int64_t n = static_cast<int64_t>(cond.size());
    if (n == 0) throw Error("ode_sample: no conditions supplied");
    auto levels = inference_schedule(cfg.steps, cfg.rho, edm.sigma_min, edm.sigma_max);
    levels.push_back(0.0);  // terminal full-denoise step

    Tensor x = initial_noise(cfg.seed, n, dim, levels[0]);
    record(trajectory, levels[0], x);
    const bool heun = cfg.kind == SamplerKind::Heun;
    for (size_t i = 0; i + 1 < levels.size(); ++i) {
        double s_cur = levels[i];
        double s_next = levels[i + 1];
        GuidedPair pair = guided_denoise_pair(denoiser, x, s_cur, cond, cfg.guidance);
        if (cfg.guidance.mode == GuidanceMode::CfgPlusPlus) {
            // Renoise along the unconditional prediction.
            double ratio = s_next / s_cur;
            for (int64_t e = 0; e < x.size(); ++e) x[e] = pair.guided[e] + ratio * (x[e] - pair.uncond[e]);
        } else {
            double h = s_next - s_cur;
            Tensor d1 = drift_from_denoiser(x, s_cur, pair.guided);
            if (heun && s_next > 0.0) {
                Tensor x_pred(x.shape());
                for (int64_t e = 0; e < x.size(); ++e) x_pred[e] = x[e] + h * d1[e];
                Tensor xhat2 = guided_denoise(denoiser, x_pred, s_next, cond, cfg.guidance);
                Tensor d2 = drift_from_denoiser(x_pred, s_next, xhat2);
                for (int64_t e = 0; e < x.size(); ++e) x[e] += h * 0.5 * (d1[e] + d2[e]);
            } else {
                for (int64_t e = 0; e < x.size(); ++e) x[e] += h * d1[e];
            }
        }
        check_state(x, s_next);
        record(trajectory, s_next, x);
    }
    return x;
}

Tensor dpm2s_sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                    std::span<const Condition> cond, Trajectory* trajectory) {
    cfg.validate();
    NoGradGuard guard;
    const int64_t n = static_cast<int64_t>(cond.size());
    if (n == 0) throw Error("dpm2s_sample: no conditions supplied");
    auto levels = inference_schedule(cfg.steps, cfg.rho, edm.sigma_min, edm.sigma_max);
    levels.push_back(0.0);

    Tensor x = initial_noise(cfg.seed, n, dim, levels[0]);
    record(trajectory, levels[0], x);
    Tensor old_denoised;
    double h_last = 0.0;
    for (size_t i = 0; i + 1 < levels.size(); ++i) {
        double s_cur = levels[i];
        double s_next = levels[i + 1];
        GuidedPair pair = guided_denoise_pair(denoiser, x, s_cur, cond, cfg.guidance);
        if (cfg.guidance.mode == GuidanceMode::CfgPlusPlus) {
            double ratio = s_next > 0 ? s_next / s_cur : 0.0;
            for (int64_t e = 0; e < x.size(); ++e) x[e] = pair.guided[e] + ratio * (x[e] - pair.uncond[e]);
        } else if (s_next == 0.0) {
            x = pair.guided;
        } else {
            // Multistep recurrence in t = -ln(sigma), data prediction.
            double h = std::log(s_cur / s_next);
            double ratio = s_next / s_cur;
            double ex = -std::expm1(-h);  // 1 - sigma_next / sigma_cur
            bool second_order = old_denoised.defined() && i + 2 < levels.size();
            if (second_order) {
                double r = h_last / h;
                double c1 = 1.0 + 1.0 / (2.0 * r);
                double c0 = -1.0 / (2.0 * r);
                for (int64_t e = 0; e < x.size(); ++e) {
                    double d = c1 * pair.guided[e] + c0 * old_denoised[e];
                    x[e] = ratio * x[e] + ex * d;
                }
            } else {
                for (int64_t e = 0; e < x.size(); ++e) x[e] = ratio * x[e] + ex * pair.guided[e];
            }
            h_last = h;
        }
        old_denoised = pair.guided;
        check_state(x, s_next);
        record(trajectory, s_next, x);
    }
    return x;
}

Tensor ping_pong_sample(const Denoiser& generator, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                        std::span<const Condition> cond, Trajectory* trajectory) {
    cfg.validate();
    NoGradGuard guard;
    const int64_t n = static_cast<int64_t>(cond.size());
    if (n == 0) throw Error("ping_pong_sample: no conditions supplied");
    auto levels = inference_schedule(cfg.steps, cfg.rho, edm.sigma_min, edm.sigma_max);

    SeededStream root(cfg.seed);
    std::vector<SeededStream> streams;
    streams.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) streams.push_back(root.child(static_cast<uint64_t>(i)));

    Tensor x({n, dim});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < dim; ++j) x[i * dim + j] = levels[0] * streams[static_cast<size_t>(i)].gaussian();
    }
    record(trajectory, levels[0], x);
    Tensor denoised;
    for (size_t i = 0; i < levels.size(); ++i) {
        denoised = generator.denoise(x, levels[i], cond);
        check_state(denoised, levels[i]);
        if (i + 1 < levels.size()) {
            double s_next = levels[i + 1];
            for (int64_t r = 0; r < n; ++r) {
                for (int64_t j = 0; j < dim; ++j) {
                    x[r * dim + j] = denoised[r * dim + j] + s_next * streams[static_cast<size_t>(r)].gaussian();
                }
            }
            record(trajectory, s_next, x);
        }
    }
    record(trajectory, 0.0, denoised);
    return denoised;
}

Tensor sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
              std::span<const Condition> cond, Trajectory* trajectory) {
    switch (cfg.kind) {
        case SamplerKind::Euler:
        case SamplerKind::Heun:
            return ode_sample(denoiser, cfg, edm, dim, cond, trajectory);
        case SamplerKind::Dpm2S:
            return dpm2s_sample(denoiser, cfg, edm, dim, cond, trajectory);
        case SamplerKind::PingPong:
            return ping_pong_sample(denoiser, cfg, edm, dim, cond, trajectory);
    }
    throw ConfigError("sample: unknown sampler kind");
}

}  // namespace edmd
