#include "edmd/distill_layer.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

std::string to_string(DropVariant v) {
    return v == DropVariant::BaselineBack ? "baseline_back" : "shifted_keep_last";
}

DropVariant drop_variant_from_string(const std::string& s) {
    if (s == "baseline_back" || s == "back") return DropVariant::BaselineBack;
    if (s == "shifted_keep_last" || s == "shifted") return DropVariant::ShiftedKeepLast;
    throw ConfigError("unknown drop variant '" + s + "' (want baseline_back|shifted_keep_last)");
}

void DropSchedule::validate() const {
    if (budgets.size() != 5) throw ConfigError("drop schedule: need exactly 5 per-quintile budgets");
    for (int64_t b : budgets) {
        if (b < 0 || b >= reference_depth) {
            throw ConfigError("drop schedule: budgets must lie in [0, reference_depth)");
        }
    }
    if (reference_depth < 2) throw ConfigError("drop schedule: reference_depth must be >= 2");
    if (rho < 1.0) throw ConfigError("drop schedule: rho must be >= 1");
}

std::vector<int64_t> DropSchedule::scaled_budgets(int64_t depth) const {
    validate();
    std::vector<int64_t> out(budgets.size());
    for (size_t i = 0; i < budgets.size(); ++i) {
        double scaled = static_cast<double>(budgets[i]) * static_cast<double>(depth) /
                        static_cast<double>(reference_depth);
        out[i] = static_cast<int64_t>(std::llround(scaled));
        if (out[i] >= depth) {
            throw ConfigError("drop schedule: scaled budget " + std::to_string(out[i]) + " >= depth " +
                              std::to_string(depth));
        }
    }
    return out;
}

int DropSchedule::quintile(double sigma, const EdmConfig& edm) const {
    double u = u_from_sigma(sigma, rho, edm.sigma_min, edm.sigma_max);
    int q = static_cast<int>(u * 5.0);
    return std::min(q, 4);
}

int64_t DropSchedule::budget_for(double sigma, int64_t depth, const EdmConfig& edm) const {
    return scaled_budgets(depth)[static_cast<size_t>(quintile(sigma, edm))];
}

std::vector<int> executed_for_budget(int64_t budget, int64_t depth, DropVariant variant) {
    if (budget < 0 || budget >= depth) {
        throw ConfigError("drop set: budget " + std::to_string(budget) + " out of range for depth " +
                          std::to_string(depth));
    }
    std::vector<int> out;
    if (budget == 0) {
        for (int i = 1; i <= depth; ++i) out.push_back(i);
        return out;
    }
    if (variant == DropVariant::BaselineBack) {
        for (int i = 1; i <= depth - budget; ++i) out.push_back(i);
    } else {
        for (int i = 1; i <= depth - budget - 1; ++i) out.push_back(i);
        out.push_back(static_cast<int>(depth));
    }
    return out;
}

std::vector<int> drop_set(double sigma, const DropSchedule& schedule, int64_t depth, const EdmConfig& edm) {
    return executed_for_budget(schedule.budget_for(sigma, depth, edm), depth, schedule.variant);
}

Var self_teacher_loss(const Var& h_dropped, const Var& h_full) {
    if (!same_shape(h_dropped.value().shape(), h_full.value().shape())) {
        throw ShapeError("self_teacher_loss: shapes " + shape_str(h_dropped.value().shape()) + " vs " +
                         shape_str(h_full.value().shape()));
    }
    return mean(square(sub(h_dropped, h_full)));
}

void LayerDistillConfig::validate() const {
    schedule.validate();
    if (self_teacher_weight < 0) throw ConfigError("layer_distill.self_teacher_weight must be >= 0");
    if (steps < 1 || batch < 1) throw ConfigError("layer_distill: steps and batch must be >= 1");
}

LayerStepLosses layer_distill_step(DitDenoiser& denoiser, const Tensor& x_real, std::span<const Condition> cond,
                                   const LayerDistillConfig& cfg, AdamState& opt, SeededStream& stream) {
    cfg.validate();
    auto model = denoiser.model();
    const int64_t depth = model->config().depth;
    if (cfg.budget_conditioning && !model->config().budget_path) {
        throw ConfigError("layer_distill: budget conditioning requires a budget-path model");
    }
    auto train_dist = NoiseDistribution::train_lognormal(denoiser.edm());
    LayerStepLosses losses;
    losses.sigma = sample_sigma(train_dist, stream);
    losses.budget = cfg.schedule.budget_for(losses.sigma, depth, denoiser.edm());
    std::vector<int> executed = executed_for_budget(losses.budget, depth, cfg.schedule.variant);
    int fed_budget = cfg.budget_conditioning ? static_cast<int>(losses.budget) : 0;

    const int64_t b = x_real.dim(0);
    const int64_t d = x_real.dim(1);
    Tensor noisy(x_real.shape());
    for (int64_t i = 0; i < b * d; ++i) noisy[i] = x_real[i] + losses.sigma * stream.gaussian();

    // Full-path hidden target under stop-gradient (budget input 0).
    Tensor h_full_value;
    {
        NoGradGuard guard;
        h_full_value =
            denoiser.denoise_var_dropped(Var::constant(noisy), losses.sigma, cond, model->all_layers(), 0)
                .final_norm.value();
    }

    auto dropped = denoiser.denoise_var_dropped(Var::constant(noisy), losses.sigma, cond, executed, fed_budget);
    Var residual = sub(Var::constant(x_real), dropped.denoised);
    Var loss_dsm = scale(sum(square(residual)), dsm_weight(losses.sigma, denoiser.edm()) / static_cast<double>(b));
    Var total = loss_dsm;
    Var st;
    if (cfg.self_teacher_weight > 0) {
        st = self_teacher_loss(dropped.final_norm, Var::constant(h_full_value));
        total = add(total, scale(st, cfg.self_teacher_weight));
    }
    for (const Var& p : model->params()) p.zero_grad();
    total.backward();
    opt.step(model->params());

    losses.dsm = loss_dsm.value().item();
    losses.self_teacher = st.defined() ? st.value().item() : 0.0;
    losses.total = total.value().item();
    return losses;
}

std::vector<TrainLogRow> train_layer_distill(DitDenoiser& denoiser, const SyntheticDataset& data,
                                             const LayerDistillConfig& cfg, SeededStream& stream) {
    cfg.validate();
    AdamState opt(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    std::vector<TrainLogRow> log;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        auto rows = draw_batch_rows(data.size(), cfg.batch, stream);
        Tensor x = data.gather(rows);
        auto cond = data.gather_conditions(rows);
        auto losses = layer_distill_step(denoiser, x, cond, cfg, opt, stream);
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push_back(TrainLogRow{step, losses.total});
        }
    }
    return log;
}

DitDenoiser::DropPolicy make_drop_policy(const DropSchedule& schedule, int64_t depth, bool budget_conditioning,
                                         const EdmConfig& edm) {
    schedule.validate();
    return [schedule, depth, budget_conditioning, edm](double sigma) {
        DitDenoiser::Drop drop;
        int64_t budget = schedule.budget_for(sigma, depth, edm);
        drop.executed = executed_for_budget(budget, depth, schedule.variant);
        drop.budget = budget_conditioning ? static_cast<int>(budget) : 0;
        return drop;
    };
}

}  // namespace edmd
