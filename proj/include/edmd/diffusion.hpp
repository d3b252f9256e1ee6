#pragma once

#include <functional>
#include <vector>

#include "edmd/autodiff.hpp"
#include "edmd/denoiser.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

struct EdmConfig {
    double sigma_data = 0.5;
    double p_mean = -0.4;
    double p_std = 1.0;
    double sigma_min = 0.002;
    double sigma_max = 80.0;

    void validate() const;
};

struct PreconditionCoeffs {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

PreconditionCoeffs precondition(double sigma, const EdmConfig& cfg);

// DSM weighting lambda(sigma) = 1 / c_out(sigma)^2.
double dsm_weight(double sigma, const EdmConfig& cfg);

// Signal-to-noise ratio 1/sigma^2 in decibels: -20 log10(sigma).
double snr_db(double sigma);

// Score of the smoothed marginal from a denoised estimate: (xhat - x) / sigma^2.
Tensor score_from_denoiser(const Tensor& x, double sigma, const Tensor& xhat);
// Probability-flow drift dx/dsigma = (x - xhat) / sigma; the sigma-scaled
// residual form of the score.
Tensor drift_from_denoiser(const Tensor& x, double sigma, const Tensor& xhat);

// ---- denoiser assembly ------------------------------------------------------

// Wraps a raw network call f(c_in * x, c_noise) into the preconditioned
// denoiser c_skip * x + c_out * f(...). Scalar sigma applies to the whole
// batch; the vector overload takes one sigma per row.
Tensor denoise(const std::function<Tensor(const Tensor&, double)>& net, const Tensor& x, double sigma,
               const EdmConfig& cfg);
Var denoise(const std::function<Var(const Var&, const Tensor&)>& net, const Var& x, const Tensor& sigma,
            const EdmConfig& cfg);

// ---- noise distributions ----------------------------------------------------

struct NoiseDistribution {
    enum class Kind { TrainLogNormal, InferencePower };
    Kind kind = Kind::TrainLogNormal;
    double p_mean = -0.4;
    double p_std = 1.0;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    // 0 = continuous; N > 0 draws uniformly from the N discretized levels.
    int discretization = 0;
    // Non-empty overrides discretized levels with an explicit list.
    std::vector<double> explicit_levels;

    static NoiseDistribution train_lognormal(const EdmConfig& cfg);
    static NoiseDistribution inference_power(const EdmConfig& cfg, double rho = 7.0, int discretization = 0);
    static NoiseDistribution discrete_levels(std::vector<double> levels);

    void validate() const;
};

double sample_sigma(const NoiseDistribution& dist, SeededStream& stream);

// The rho-power interpolation sigma(u) for u in [0, 1]; u = 0 -> sigma_max.
double sigma_from_u(double u, double rho, double sigma_min, double sigma_max);
// Inverse of sigma_from_u, clamped to [0, 1].
double u_from_sigma(double sigma, double rho, double sigma_min, double sigma_max);

// N strictly decreasing levels; endpoints pinned to sigma_max / sigma_min
// exactly. N = 1 returns {sigma_max}.
std::vector<double> inference_schedule(int n, double rho, double sigma_min, double sigma_max);

// ---- guidance ----------------------------------------------------------------

enum class GuidanceMode { Cfg, CfgPlusPlus };

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::Cfg;
    double weight = 1.0;

    void validate() const;
};

struct GuidedPair {
    Tensor guided;
    Tensor uncond;
};

// xhat = mu(x, sigma, null) + w * (mu(x, sigma, e) - mu(x, sigma, null)).
// Also returns the unconditional prediction, which drives the renoising
// direction in CFG++ samplers.
GuidedPair guided_denoise_pair(const Denoiser& d, const Tensor& x, double sigma, std::span<const Condition> cond,
                               const GuidanceConfig& g);
Tensor guided_denoise(const Denoiser& d, const Tensor& x, double sigma, std::span<const Condition> cond,
                      const GuidanceConfig& g);

// ---- DSM loss -----------------------------------------------------------------

// lambda(sigma) * mean_batch ||x_real - d(x_real + eps * sigma, sigma)||^2
// (squared norm summed over data dims, averaged over the batch).
double dsm_loss(const Denoiser& d, const Tensor& x_real, double sigma, const Tensor& eps, const EdmConfig& cfg,
                std::span<const Condition> cond = {});

}  // namespace edmd
