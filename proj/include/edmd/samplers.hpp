#pragma once

#include <span>
#include <string>
#include <vector>

#include "edmd/denoiser.hpp"
#include "edmd/diffusion.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

enum class SamplerKind { Euler, Heun, Dpm2S, PingPong };

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& name);

struct SamplerConfig {
    SamplerKind kind = SamplerKind::Heun;
    int steps = 40;
    double rho = 7.0;
    GuidanceConfig guidance{GuidanceMode::Cfg, 1.0};
    uint64_t seed = 0;

    void validate() const;
};

// States along the noise schedule, sigma strictly decreasing. ODE samplers
// record the initial state at sigma_max, the state after each transition, and
// a terminal fully denoised state at sigma = 0 (N + 1 entries for N levels).
struct Trajectory {
    std::vector<double> sigmas;
    std::vector<Tensor> states;
};

// Probability-flow ODE sampling (Euler or Heun per cfg.kind) from pure noise.
// One output row per condition entry; per-sample noise comes from child
// streams of cfg.seed so results are independent of batch composition.
Tensor ode_sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                  std::span<const Condition> cond, Trajectory* trajectory = nullptr);

// Second-order multistep data-prediction sampler in log-sigma. In CFG++ mode
// the renoising direction follows the unconditional prediction.
Tensor dpm2s_sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                    std::span<const Condition> cond, Trajectory* trajectory = nullptr);

// Few-step generator sampling: denoise, then renoise to the next smaller
// level with fresh noise.
Tensor ping_pong_sample(const Denoiser& generator, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
                        std::span<const Condition> cond, Trajectory* trajectory = nullptr);

// Dispatch on cfg.kind.
Tensor sample(const Denoiser& denoiser, const SamplerConfig& cfg, const EdmConfig& edm, int64_t dim,
              std::span<const Condition> cond, Trajectory* trajectory = nullptr);

}  // namespace edmd
