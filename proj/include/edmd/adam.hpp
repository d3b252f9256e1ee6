#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "edmd/autodiff.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. One state instance per parameter list; moments
// are keyed by position, so the list must be stable across calls.
class AdamState {
  public:
    AdamState() = default;
    explicit AdamState(AdamConfig config) : config_(config) {}

    // Applies one update from the accumulated grads. Parameters with no grad
    // are treated as zero-gradient. Throws NumericError on non-finite
    // gradients without touching any state.
    void step(std::span<const Var> params);

    int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return config_; }

    // Checkpoint access.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_step_count(int64_t n) { step_count_ = n; }

  private:
    AdamConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    int64_t step_count_ = 0;
};

}  // namespace edmd
