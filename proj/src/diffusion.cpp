#include "edmd/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

void EdmConfig::validate() const {
    if (sigma_data <= 0) throw ConfigError("edm.sigma_data must be > 0");
    if (p_std <= 0) throw ConfigError("edm.p_std must be > 0");
    if (sigma_min <= 0) throw ConfigError("edm.sigma_min must be > 0");
    if (sigma_max <= sigma_min) throw ConfigError("edm.sigma_max must exceed sigma_min");
}

PreconditionCoeffs precondition(double sigma, const EdmConfig& cfg) {
    if (sigma <= 0) throw DomainError("precondition: sigma must be > 0, got " + std::to_string(sigma));
    double sd2 = cfg.sigma_data * cfg.sigma_data;
    double s2 = sigma * sigma;
    double denom = std::sqrt(s2 + sd2);
    PreconditionCoeffs c;
    c.c_skip = sd2 / (s2 + sd2);
    c.c_out = sigma * cfg.sigma_data / denom;
    c.c_in = 1.0 / denom;
    c.c_noise = std::log(sigma) / 4.0;
    return c;
}

double dsm_weight(double sigma, const EdmConfig& cfg) {
    PreconditionCoeffs c = precondition(sigma, cfg);
    return 1.0 / (c.c_out * c.c_out);
}

double snr_db(double sigma) {
    if (sigma <= 0) throw DomainError("snr_db: sigma must be > 0, got " + std::to_string(sigma));
    return -20.0 * std::log10(sigma);
}

Tensor score_from_denoiser(const Tensor& x, double sigma, const Tensor& xhat) {
    if (sigma <= 0) throw DomainError("score_from_denoiser: sigma must be > 0");
    if (!same_shape(x.shape(), xhat.shape())) {
        throw ShapeError("score_from_denoiser: shapes " + shape_str(x.shape()) + " vs " + shape_str(xhat.shape()));
    }
    Tensor out(x.shape());
    double inv = 1.0 / (sigma * sigma);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (xhat[i] - x[i]) * inv;
    return out;
}

Tensor drift_from_denoiser(const Tensor& x, double sigma, const Tensor& xhat) {
    if (sigma <= 0) throw DomainError("drift_from_denoiser: sigma must be > 0");
    if (!same_shape(x.shape(), xhat.shape())) {
        throw ShapeError("drift_from_denoiser: shapes " + shape_str(x.shape()) + " vs " + shape_str(xhat.shape()));
    }
    Tensor out(x.shape());
    double inv = 1.0 / sigma;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (x[i] - xhat[i]) * inv;
    return out;
}

Tensor denoise(const std::function<Tensor(const Tensor&, double)>& net, const Tensor& x, double sigma,
               const EdmConfig& cfg) {
    PreconditionCoeffs c = precondition(sigma, cfg);
    Tensor x_in(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) x_in[i] = c.c_in * x[i];
    Tensor f = net(x_in, c.c_noise);
    if (!same_shape(f.shape(), x.shape())) {
        throw ShapeError("denoise: network output " + shape_str(f.shape()) + " does not match input " +
                         shape_str(x.shape()));
    }
    Tensor out(x.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = c.c_skip * x[i] + c.c_out * f[i];
    return out;
}

Var denoise(const std::function<Var(const Var&, const Tensor&)>& net, const Var& x, const Tensor& sigma,
            const EdmConfig& cfg) {
    const Shape& xs = x.value().shape();
    if (xs.size() != 2) throw ShapeError("denoise: expected (B, D) input, got " + shape_str(xs));
    int64_t b = xs[0];
    if (sigma.rank() != 1 || sigma.dim(0) != b) {
        throw ShapeError("denoise: sigma shape " + shape_str(sigma.shape()) + " does not match batch " +
                         std::to_string(b));
    }
    Tensor cskip({b, 1}), cout({b, 1}), cin({b, 1}), cnoise({b});
    for (int64_t i = 0; i < b; ++i) {
        PreconditionCoeffs c = precondition(sigma[i], cfg);
        cskip[i] = c.c_skip;
        cout[i] = c.c_out;
        cin[i] = c.c_in;
        cnoise[i] = c.c_noise;
    }
    Var x_in = mul(x, Var::constant(cin));
    Var f = net(x_in, cnoise);
    return add(mul(x, Var::constant(cskip)), mul(f, Var::constant(cout)));
}

// ---- noise distributions ----------------------------------------------------

NoiseDistribution NoiseDistribution::train_lognormal(const EdmConfig& cfg) {
    NoiseDistribution d;
    d.kind = Kind::TrainLogNormal;
    d.p_mean = cfg.p_mean;
    d.p_std = cfg.p_std;
    d.sigma_min = cfg.sigma_min;
    d.sigma_max = cfg.sigma_max;
    return d;
}

NoiseDistribution NoiseDistribution::inference_power(const EdmConfig& cfg, double rho, int discretization) {
    NoiseDistribution d;
    d.kind = Kind::InferencePower;
    d.p_mean = cfg.p_mean;
    d.p_std = cfg.p_std;
    d.sigma_min = cfg.sigma_min;
    d.sigma_max = cfg.sigma_max;
    d.rho = rho;
    d.discretization = discretization;
    return d;
}

NoiseDistribution NoiseDistribution::discrete_levels(std::vector<double> levels) {
    NoiseDistribution d;
    d.kind = Kind::InferencePower;
    d.discretization = static_cast<int>(levels.size());
    d.explicit_levels = std::move(levels);
    d.validate();
    return d;
}

void NoiseDistribution::validate() const {
    if (kind == Kind::TrainLogNormal) {
        if (p_std <= 0) throw ConfigError("noise distribution: p_std must be > 0");
        return;
    }
    if (rho < 1.0) throw DomainError("noise distribution: rho must be >= 1");
    if (!explicit_levels.empty()) {
        for (size_t i = 0; i < explicit_levels.size(); ++i) {
            if (explicit_levels[i] <= 0) throw ConfigError("noise distribution: levels must be positive");
            if (i > 0 && explicit_levels[i] >= explicit_levels[i - 1]) {
                throw ConfigError("noise distribution: explicit levels must be strictly decreasing");
            }
        }
        return;
    }
    if (sigma_min <= 0 || sigma_max <= sigma_min) {
        throw ConfigError("noise distribution: need 0 < sigma_min < sigma_max");
    }
}

double sigma_from_u(double u, double rho, double sigma_min, double sigma_max) {
    double a = std::pow(sigma_max, 1.0 / rho);
    double b = std::pow(sigma_min, 1.0 / rho);
    return std::pow(a + u * (b - a), rho);
}

double u_from_sigma(double sigma, double rho, double sigma_min, double sigma_max) {
    double a = std::pow(sigma_max, 1.0 / rho);
    double b = std::pow(sigma_min, 1.0 / rho);
    double u = (std::pow(sigma, 1.0 / rho) - a) / (b - a);
    return std::clamp(u, 0.0, 1.0);
}

double sample_sigma(const NoiseDistribution& dist, SeededStream& stream) {
    dist.validate();
    if (dist.kind == NoiseDistribution::Kind::TrainLogNormal) {
        return std::exp(dist.p_mean + dist.p_std * stream.gaussian());
    }
    if (!dist.explicit_levels.empty()) {
        size_t idx = static_cast<size_t>(stream.next_u64() % dist.explicit_levels.size());
        return dist.explicit_levels[idx];
    }
    if (dist.discretization > 0) {
        auto levels = inference_schedule(dist.discretization, dist.rho, dist.sigma_min, dist.sigma_max);
        size_t idx = static_cast<size_t>(stream.next_u64() % levels.size());
        return levels[idx];
    }
    return sigma_from_u(stream.uniform(), dist.rho, dist.sigma_min, dist.sigma_max);
}

std::vector<double> inference_schedule(int n, double rho, double sigma_min, double sigma_max) {
    if (n < 1) throw DomainError("inference_schedule: N must be >= 1");
    if (rho < 1.0) throw DomainError("inference_schedule: rho must be >= 1, got " + std::to_string(rho));
    if (sigma_min <= 0 || sigma_max <= sigma_min) {
        throw DomainError("inference_schedule: need 0 < sigma_min < sigma_max");
    }
    std::vector<double> levels(static_cast<size_t>(n));
    levels[0] = sigma_max;
    if (n == 1) return levels;
    for (int i = 1; i + 1 < n; ++i) {
        double u = static_cast<double>(i) / static_cast<double>(n - 1);
        levels[static_cast<size_t>(i)] = sigma_from_u(u, rho, sigma_min, sigma_max);
    }
    levels[static_cast<size_t>(n - 1)] = sigma_min;
    return levels;
}

// ---- guidance ----------------------------------------------------------------

void GuidanceConfig::validate() const {
    if (weight < 0) throw ConfigError("guidance.weight must be >= 0");
    if (mode == GuidanceMode::CfgPlusPlus && (weight <= 0 || weight > 1)) {
        throw ConfigError("guidance: CFG++ requires weight in (0, 1], got " + std::to_string(weight));
    }
}

GuidedPair guided_denoise_pair(const Denoiser& d, const Tensor& x, double sigma, std::span<const Condition> cond,
                               const GuidanceConfig& g) {
    g.validate();
    std::vector<Condition> null_cond(cond.begin(), cond.end());
    for (auto& c : null_cond) c = null_condition(c);
    GuidedPair out;
    out.uncond = d.denoise(x, sigma, null_cond);
    if (g.weight == 0.0) {
        out.guided = out.uncond;
        return out;
    }
    Tensor with_cond = d.denoise(x, sigma, cond);
    if (g.weight == 1.0) {
        out.guided = std::move(with_cond);
        return out;
    }
    out.guided = Tensor(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        out.guided[i] = out.uncond[i] + g.weight * (with_cond[i] - out.uncond[i]);
    }
    return out;
}

Tensor guided_denoise(const Denoiser& d, const Tensor& x, double sigma, std::span<const Condition> cond,
                      const GuidanceConfig& g) {
    return guided_denoise_pair(d, x, sigma, cond, g).guided;
}

// ---- DSM loss -----------------------------------------------------------------

double dsm_loss(const Denoiser& d, const Tensor& x_real, double sigma, const Tensor& eps, const EdmConfig& cfg,
                std::span<const Condition> cond) {
    if (!same_shape(x_real.shape(), eps.shape())) {
        throw ShapeError("dsm_loss: shapes " + shape_str(x_real.shape()) + " vs " + shape_str(eps.shape()));
    }
    if (x_real.rank() != 2) throw ShapeError("dsm_loss: expected (B, D) batch, got " + shape_str(x_real.shape()));
    Tensor noisy(x_real.shape());
    for (int64_t i = 0; i < noisy.size(); ++i) noisy[i] = x_real[i] + sigma * eps[i];
    Tensor xhat = d.denoise(noisy, sigma, cond);
    double lam = dsm_weight(sigma, cfg);
    int64_t b = x_real.dim(0);
    double acc = 0.0;
    for (int64_t i = 0; i < x_real.size(); ++i) {
        double r = x_real[i] - xhat[i];
        acc += r * r;
    }
    double loss = lam * acc / static_cast<double>(b);
    if (!std::isfinite(loss)) {
        throw NumericError("dsm_loss: non-finite loss at sigma = " + std::to_string(sigma));
    }
    return loss;
}

}  // namespace edmd
