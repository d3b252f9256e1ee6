#pragma once

#include <optional>
#include <vector>

#include "edmd/denoiser.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

struct GmmComponent {
    double weight = 1.0;
    Tensor mean;  // (D,)
    Tensor cov;   // (D, D), symmetric positive definite
};

// Gaussian mixture with exact denoising and score formulas; the analytic
// stand-in for an optimal score model on synthetic data.
class GmmOracle {
  public:
    explicit GmmOracle(std::vector<GmmComponent> components);

    int64_t dim() const { return dim_; }
    int64_t component_count() const { return static_cast<int64_t>(components_.size()); }
    const std::vector<GmmComponent>& components() const { return components_; }

    // Posterior mean E[clean | x, sigma] for x: (B, D). `component` restricts
    // the mixture to a single component (conditional oracle).
    Tensor denoise(const Tensor& x, double sigma, std::optional<int> component = std::nullopt) const;

    // Exact score of the sigma-smoothed marginal.
    Tensor score(const Tensor& x, double sigma) const;

    // log N(x; m_k, C_k + sigma^2 I); sigma = 0 gives the plain component
    // log-density.
    double component_loglik(const double* x, int64_t k, double sigma) const;

    // Index of the most likely component for each row (sigma = 0 densities
    // weighted by component weights).
    std::vector<int> map_component(const Tensor& x) const;

    Tensor sample(int64_t n, SeededStream& stream, std::vector<int>* component_out = nullptr) const;

    Tensor mixture_mean() const;  // sum_k w_k m_k

  private:
    struct Chol;  // Cholesky cache per (component, sigma) evaluation
    std::vector<GmmComponent> components_;
    int64_t dim_ = 0;
};

// Denoiser view over a GmmOracle where category k conditions on component k
// and the null category uses the full mixture.
class GmmDenoiser : public Denoiser {
  public:
    explicit GmmDenoiser(const GmmOracle& oracle) : oracle_(oracle) {}
    Tensor denoise(const Tensor& x, double sigma, std::span<const Condition> cond) const override;

  private:
    const GmmOracle& oracle_;
};

}  // namespace edmd
