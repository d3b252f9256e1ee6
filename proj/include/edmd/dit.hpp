#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "edmd/autodiff.hpp"
#include "edmd/denoiser.hpp"
#include "edmd/diffusion.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

struct DitConfig {
    int64_t depth = 12;
    int64_t width = 64;
    int64_t heads = 4;
    int64_t tokens = 16;
    int64_t categories = 4;
    int64_t tempo_buckets = 4;
    int64_t mlp_mult = 4;
    bool budget_path = false;

    void validate() const;
};

// Miniature diffusion transformer over per-scalar tokens with adaptive-norm
// conditioning from summed noise / tempo / category (and optionally budget)
// embeddings. Layers can be skipped at call time; the residual stream routes
// past skipped blocks unchanged.
class DitModel {
  public:
    DitModel(const DitConfig& config, uint64_t init_seed);
    DitModel(DitModel&&) = default;
    DitModel& operator=(DitModel&&) = default;
    // Deep copies go through clone(); plain copies would alias parameters.
    DitModel(const DitModel&) = delete;
    DitModel& operator=(const DitModel&) = delete;

    struct ForwardResult {
        Var output;               // (B, T)
        std::vector<Var> hidden;  // residual state after each executed layer
        Var final_norm;           // (B, T, W): normalized stream before de-embedding
    };

    // x_tokens: (B, T); c_noise: (B,); executed_layers: ascending 1-based
    // subset of {1..depth}; budget: (B,) dropped-layer counts, required iff
    // the model has the budget path.
    ForwardResult forward(const Var& x_tokens, const Tensor& c_noise, std::span<const Condition> cond,
                          const std::optional<Tensor>& budget, std::span<const int> executed_layers) const;

    std::vector<int> all_layers() const;

    const DitConfig& config() const { return config_; }
    std::span<const Var> params() const { return params_; }
    std::span<Var> params_mut() { return params_; }
    const std::vector<std::string>& param_names() const { return names_; }
    Var param(const std::string& name) const;

    int64_t param_count() const;

    DitModel clone() const;
    // Copy of this model with the budget path enabled; budget modules start
    // zero-initialized so outputs match this model exactly.
    DitModel with_budget_path() const;
    // Copies values for every name both models share.
    void copy_common_params_from(const DitModel& other);

    bool params_bitwise_equal(const DitModel& other) const;

  private:
    DitModel() = default;
    void build_params(uint64_t init_seed);
    Var p(size_t idx) const { return params_[idx]; }

    DitConfig config_;
    std::vector<Var> params_;
    std::vector<std::string> names_;
    // index lookup per role
    struct Layout;
    std::shared_ptr<const Layout> layout_;
};

// Preconditioned denoiser around a DitModel. The optional drop policy maps a
// noise level to the executed layer set and budget (layer-dropped models).
class DitDenoiser : public Denoiser {
  public:
    struct Drop {
        std::vector<int> executed;  // 1-based
        int budget = 0;
    };
    using DropPolicy = std::function<Drop(double sigma)>;

    DitDenoiser(std::shared_ptr<DitModel> model, EdmConfig edm);

    void set_drop_policy(DropPolicy policy) { policy_ = std::move(policy); }
    bool has_drop_policy() const { return static_cast<bool>(policy_); }
    // Layer set and budget for one noise level: the policy when set, the full
    // stack otherwise.
    Drop drop_for(double sigma) const;
    std::shared_ptr<DitModel> model() { return model_; }
    std::shared_ptr<const DitModel> model() const { return model_; }
    const EdmConfig& edm() const { return edm_; }

    // Plain evaluation (no graph); applies the drop policy when set.
    Tensor denoise(const Tensor& x, double sigma, std::span<const Condition> cond) const override;

    // Training path: per-sample sigma, full layer stack.
    Var denoise_var(const Var& x, const Tensor& sigma, std::span<const Condition> cond) const;

    // Training path with explicit layer control (batch-shared sigma).
    struct VarResult {
        Var denoised;
        Var final_norm;
        std::vector<Var> hidden;
    };
    VarResult denoise_var_dropped(const Var& x, double sigma, std::span<const Condition> cond,
                                  std::span<const int> executed_layers, int budget) const;

  private:
    std::shared_ptr<DitModel> model_;
    EdmConfig edm_;
    DropPolicy policy_;
};

// Per-layer hidden-state variance at each noise level; rows follow
// sigma_levels, columns follow layer depth.
struct ActivationProfile {
    std::vector<double> sigma_levels;
    std::vector<std::vector<double>> variance;  // [sigma][layer]

    double last_to_median_ratio(size_t sigma_idx) const;
};

ActivationProfile variance_profile(const DitDenoiser& denoiser, const Tensor& clean_batch,
                                   std::span<const Condition> cond, std::span<const double> sigma_levels,
                                   SeededStream& stream);

}  // namespace edmd
