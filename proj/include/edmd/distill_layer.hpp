#pragma once

#include <string>
#include <vector>

#include "edmd/adam.hpp"
#include "edmd/dataset.hpp"
#include "edmd/dit.hpp"
#include "edmd/teacher.hpp"

namespace edmd {

enum class DropVariant { BaselineBack, ShiftedKeepLast };

std::string to_string(DropVariant v);
DropVariant drop_variant_from_string(const std::string& s);

// Per-noise-quintile dropped-layer budgets, stated at a reference depth and
// proportionally rescaled for smaller models. Quintile 0 covers the highest
// noise levels.
struct DropSchedule {
    std::vector<int64_t> budgets{14, 12, 8, 4, 0};
    DropVariant variant = DropVariant::ShiftedKeepLast;
    int64_t reference_depth = 24;
    double rho = 7.0;  // interpolant defining quintile membership

    void validate() const;
    std::vector<int64_t> scaled_budgets(int64_t depth) const;
    // Quintile of sigma under the rho-power interpolant position (equal mass
    // in schedule-index space, clamped at the range ends).
    int quintile(double sigma, const EdmConfig& edm) const;
    int64_t budget_for(double sigma, int64_t depth, const EdmConfig& edm) const;
};

// Executed 1-based layer set for a budget: BaselineBack drops the trailing
// layers; ShiftedKeepLast drops from the second-to-last backwards and always
// executes the final layer.
std::vector<int> executed_for_budget(int64_t budget, int64_t depth, DropVariant variant);
std::vector<int> drop_set(double sigma, const DropSchedule& schedule, int64_t depth, const EdmConfig& edm);

// Mean squared difference between the dropped-path and full-path normalized
// final hidden states. The caller passes the full path through stop_gradient.
Var self_teacher_loss(const Var& h_dropped, const Var& h_full);

struct LayerDistillConfig {
    DropSchedule schedule;
    bool budget_conditioning = true;
    double self_teacher_weight = 1.0;
    int64_t steps = 2000;
    int64_t batch = 64;
    double lr = 3e-4;
    int64_t log_every = 50;

    void validate() const;
};

struct LayerStepLosses {
    double dsm = 0.0;
    double self_teacher = 0.0;
    double total = 0.0;
    double sigma = 0.0;
    int64_t budget = 0;
};

// One finetuning step: one shared noise level, budgeted dropped forward with
// weighted DSM plus the self-teacher alignment, one optimizer update.
LayerStepLosses layer_distill_step(DitDenoiser& denoiser, const Tensor& x_real, std::span<const Condition> cond,
                                   const LayerDistillConfig& cfg, AdamState& opt, SeededStream& stream);

// Full finetuning loop over random batches. The denoiser's model must already
// carry a budget path when budget_conditioning is on.
std::vector<TrainLogRow> train_layer_distill(DitDenoiser& denoiser, const SyntheticDataset& data,
                                             const LayerDistillConfig& cfg, SeededStream& stream);

// Drop policy implementing the schedule for sampling and benchmarking.
DitDenoiser::DropPolicy make_drop_policy(const DropSchedule& schedule, int64_t depth, bool budget_conditioning,
                                         const EdmConfig& edm);

}  // namespace edmd
