#pragma once

#include <deque>
#include <memory>
#include <optional>
#include <vector>

#include "edmd/adam.hpp"
#include "edmd/dataset.hpp"
#include "edmd/dit.hpp"
#include "edmd/diffusion.hpp"
#include "edmd/rng.hpp"

namespace edmd {

enum class GanKind { LeastSquares, NonSaturating };
enum class NoiseSource { Train, Inference };

std::string to_string(GanKind k);
std::string to_string(NoiseSource s);
NoiseSource noise_source_from_string(const std::string& s);
GanKind gan_kind_from_string(const std::string& s);

// Which noise distribution feeds each corruption point: the generator input
// and the three loss terms.
struct NoiseRouting {
    NoiseSource gen = NoiseSource::Inference;
    NoiseSource dmd = NoiseSource::Train;
    NoiseSource dsm = NoiseSource::Train;
    NoiseSource gan = NoiseSource::Train;

    std::string str() const;  // e.g. "inf,tr,tr,tr"
};

struct CollapseGuardConfig {
    bool enabled = true;
    double real_accuracy_threshold = 0.98;
    int64_t window = 100;  // discriminator-turn iterations
};

struct StepDistillConfig {
    NoiseRouting routing;
    GanKind gan_kind = GanKind::LeastSquares;
    double nu1 = 1.0;  // generator-side GAN weight
    double nu2 = 1.0;  // discriminator-side GAN weight
    double teacher_guidance = 4.5;
    int64_t update_ratio = 5;  // fake updates per generator update
    double dmd_weight = 1.0;   // 0 = adversarial-only baseline
    enum class InputMode { Continuous, Discrete } input_mode = InputMode::Continuous;
    std::vector<double> discrete_sigmas;
    double lr_generator = 2e-4;
    double lr_fake = 2e-4;
    int64_t iterations = 3000;
    int64_t batch = 32;
    double gen_rho = 7.0;
    int64_t disc_stages = 1;
    CollapseGuardConfig collapse_guard;

    void validate(int64_t tokens) const;
    NoiseDistribution distribution(NoiseSource src, const EdmConfig& edm) const;
    NoiseDistribution generator_input_distribution(const EdmConfig& edm) const;
};

// Strided token-merging head over the fake score model's hidden activations;
// emits a low-resolution score map per sample, conditioned on the noise
// level.
class DiscriminatorHead {
  public:
    DiscriminatorHead(int64_t width, int64_t tokens, int64_t stages, uint64_t seed);

    // hidden: (B, T, W); returns (B, T / 2^stages).
    Var score_map(const Var& hidden, double sigma) const;

    std::span<const Var> params() const { return params_; }
    const std::vector<std::string>& param_names() const { return names_; }
    int64_t map_length() const { return map_length_; }

  private:
    int64_t width_;
    int64_t tokens_;
    int64_t stages_;
    int64_t map_length_;
    std::vector<Var> params_;
    std::vector<std::string> names_;
};

// ---- loss pieces (exposed for oracle tests) ----------------------------------

struct GeneratorOutput {
    Var x_gen;         // (B, D), graph-connected to the generator parameters
    double sigma_gen;  // the drawn input noise level
};

// sigma ~ p_gen, then x_gen = G(x_real + sigma * eps, sigma). The sigma draw
// consumes stream entropy before the eps draw.
GeneratorOutput generator_output(const DitDenoiser& generator, const Tensor& x_real,
                                 std::span<const Condition> cond, const NoiseDistribution& p_gen,
                                 SeededStream& stream);

// mu_fake(x_gen + sigma eps) - guided teacher prediction at the same point;
// constant with respect to the generator graph.
Tensor dmd_signal(const Denoiser& fake, const Denoiser& teacher, const Tensor& x_gen, double sigma,
                  double guidance_w, std::span<const Condition> cond, const Tensor& eps);

// Surrogate whose gradient into x_gen equals signal / batch.
Var dmd_surrogate_loss(const Var& x_gen, const Tensor& signal);

Var lsgan_generator_loss(const Var& fake_map);
Var lsgan_discriminator_loss(const Var& fake_map, const Var& real_map);
// Non-saturating variant on per-sample logits (scalar-probability head).
Var nsgan_generator_loss(const Var& fake_logits);
Var nsgan_discriminator_loss(const Var& fake_logits, const Var& real_logits);

// Per-sample mean over the score map: (B, M) -> (B, 1).
Var map_to_logits(const Var& score_map);

// ---- the training state --------------------------------------------------------

struct StepTraceRow {
    int64_t iteration = 0;
    bool generator_turn = false;
    double sigma_gen = 0.0;
    double dmd_loss = 0.0;
    double gan_generator_loss = 0.0;
    double fake_dsm_loss = 0.0;
    double gan_discriminator_loss = 0.0;
    double dmd_grad_norm = 0.0;
    double disc_real_accuracy = 0.0;  // windowed mean
};

// Online distillation of a few-step generator from a frozen teacher with a
// fake score model and adversarial head (one update per iteration; the
// generator turn comes once per update_ratio + 1 iterations).
class StepDistillState {
  public:
    StepDistillState(std::shared_ptr<DitModel> generator_model, std::shared_ptr<DitModel> teacher_model,
                     std::shared_ptr<DitModel> fake_model, EdmConfig edm, StepDistillConfig cfg,
                     uint64_t head_seed, DitDenoiser::DropPolicy generator_policy = nullptr);

    StepTraceRow iteration(const Tensor& x_real, std::span<const Condition> cond, SeededStream& stream);

    bool generator_turn_next() const;
    int64_t iterations_done() const { return iterations_; }
    int64_t generator_updates() const { return gen_updates_; }
    int64_t fake_updates() const { return fake_updates_; }

    DitDenoiser& generator() { return *generator_; }
    const DitDenoiser& generator() const { return *generator_; }
    DitDenoiser& fake_denoiser() { return *fake_; }
    const DitDenoiser& teacher() const { return *teacher_; }
    DiscriminatorHead& head() { return head_; }
    const StepDistillConfig& config() const { return cfg_; }

    // Fake-score forward + head at one noise level.
    Var disc_map(const Var& y, double sigma, std::span<const Condition> cond) const;

    double windowed_real_accuracy() const;

    AdamState& generator_optimizer() { return g1_; }
    AdamState& fake_optimizer() { return g2_; }
    void set_counters(int64_t iterations, int64_t gen_updates, int64_t fake_updates);

  private:
    std::vector<Var> fake_side_params() const;

    EdmConfig edm_;
    StepDistillConfig cfg_;
    std::shared_ptr<DitModel> generator_model_;
    std::shared_ptr<DitModel> teacher_model_;
    std::shared_ptr<DitModel> fake_model_;
    std::unique_ptr<DitDenoiser> generator_;
    std::unique_ptr<DitDenoiser> teacher_;
    std::unique_ptr<DitDenoiser> fake_;
    DiscriminatorHead head_;
    AdamState g1_;
    AdamState g2_;
    int64_t iterations_ = 0;
    int64_t gen_updates_ = 0;
    int64_t fake_updates_ = 0;
    std::deque<double> real_acc_window_;
};

// Convenience driver: runs `iterations` Algorithm iterations over random
// batches, returning the trace.
std::vector<StepTraceRow> run_step_distillation(StepDistillState& state, const SyntheticDataset& data,
                                                int64_t iterations, SeededStream& stream);

}  // namespace edmd
