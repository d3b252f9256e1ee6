#include "edmd/distill_ls.hpp"

#include "edmd/errors.hpp"

namespace edmd {

std::string to_string(LsOrder o) {
    switch (o) {
        case LsOrder::LayerThenStep: return "layer_then_step";
        case LsOrder::StepThenLayer: return "step_then_layer";
        case LsOrder::Joint: return "joint";
    }
    return "unknown";
}

std::string to_string(ScoreInit s) {
    return s == ScoreInit::OriginalTeacher ? "original_teacher" : "layer_distilled";
}

LsOrder ls_order_from_string(const std::string& s) {
    if (s == "layer_then_step") return LsOrder::LayerThenStep;
    if (s == "step_then_layer") return LsOrder::StepThenLayer;
    if (s == "joint") return LsOrder::Joint;
    throw ConfigError("unknown pipeline order '" + s + "'");
}

ScoreInit score_init_from_string(const std::string& s) {
    if (s == "original_teacher") return ScoreInit::OriginalTeacher;
    if (s == "layer_distilled") return ScoreInit::LayerDistilled;
    throw ConfigError("unknown score init '" + s + "'");
}

LsPipelineConfig::LsPipelineConfig() {
    // Conservative dropping budget for the combined pipeline.
    layer.schedule.budgets = {12, 8, 8, 0, 0};
}

void LsPipelineConfig::validate() const {
    layer.validate();
    if (order != LsOrder::LayerThenStep && !allow_failure_modes) {
        throw ConfigError("pipeline order '" + to_string(order) +
                          "' destabilizes distillation (the discriminator reaches near-perfect real accuracy); pass "
                          "allow_failure_modes to reproduce it");
    }
    if (score_init == ScoreInit::LayerDistilled && !allow_failure_modes) {
        throw ConfigError(
            "initializing the score models from the layer-distilled weights degrades the distribution-matching "
            "gradient; pass allow_failure_modes to reproduce it");
    }
}

namespace {

std::vector<StepTraceRow> run_step_stage(StepDistillState& state, const SyntheticDataset& data,
                                         int64_t iterations, SeededStream& stream, bool capture_collapse,
                                         LsPipelineResult& result) {
    std::vector<StepTraceRow> trace;
    trace.reserve(static_cast<size_t>(iterations));
    int64_t batch = state.config().batch;
    for (int64_t it = 0; it < iterations; ++it) {
        auto rows = draw_batch_rows(data.size(), batch, stream);
        Tensor x = data.gather(rows);
        auto cond = data.gather_conditions(rows);
        try {
            trace.push_back(state.iteration(x, cond, stream));
        } catch (const CollapseError& e) {
            if (!capture_collapse) throw;
            result.collapse_tripped = true;
            result.collapse_message = e.what();
            break;
        }
    }
    return trace;
}

}  // namespace

LsPipelineResult run_ls_pipeline(const DitModel& teacher, const SyntheticDataset& data, const EdmConfig& edm,
                                 const LsPipelineConfig& cfg, SeededStream& stream) {
    cfg.validate();
    LsPipelineResult result;
    const bool capture = cfg.allow_failure_modes;
    const int64_t depth = teacher.config().depth;

    auto make_policy = [&](bool conditioning) {
        return make_drop_policy(cfg.layer.schedule, depth, conditioning, edm);
    };

    if (cfg.order == LsOrder::LayerThenStep) {
        // Stage 1: budget-aware layer distillation from the teacher.
        auto layer_model = std::make_shared<DitModel>(teacher.with_budget_path());
        DitDenoiser layer_den(layer_model, edm);
        result.layer_log = train_layer_distill(layer_den, data, cfg.layer, stream);
        result.layer_stage_checkpoint = std::make_shared<DitModel>(layer_model->clone());

        // Stage 2: step distillation of the layer-distilled generator with
        // full-capacity score models from the original teacher.
        auto generator = std::make_shared<DitModel>(layer_model->clone());
        std::shared_ptr<DitModel> score_source =
            cfg.score_init == ScoreInit::OriginalTeacher
                ? std::make_shared<DitModel>(teacher.clone())
                : std::make_shared<DitModel>(layer_model->clone());
        auto fake_model = std::make_shared<DitModel>(score_source->clone());
        StepDistillState state(generator, score_source, fake_model, edm, cfg.step, stream.next_u64(),
                               make_policy(cfg.layer.budget_conditioning));
        result.step_trace = run_step_stage(state, data, cfg.step.iterations, stream, capture, result);
        result.generator = generator;
        result.fake_model = fake_model;
        result.real_score_model = score_source;
        result.generator_policy = make_policy(cfg.layer.budget_conditioning);
        return result;
    }

    if (cfg.order == LsOrder::StepThenLayer) {
        // Failure ordering: step distillation first, then layer dropping
        // finetuning on the distilled generator.
        auto generator = std::make_shared<DitModel>(teacher.clone());
        auto teacher_copy = std::make_shared<DitModel>(teacher.clone());
        auto fake_model = std::make_shared<DitModel>(teacher.clone());
        StepDistillState state(generator, teacher_copy, fake_model, edm, cfg.step, stream.next_u64());
        result.step_trace = run_step_stage(state, data, cfg.step.iterations, stream, capture, result);

        auto layered = std::make_shared<DitModel>(generator->with_budget_path());
        DitDenoiser layer_den(layered, edm);
        result.layer_log = train_layer_distill(layer_den, data, cfg.layer, stream);
        result.layer_stage_checkpoint = std::make_shared<DitModel>(layered->clone());
        result.generator = layered;
        result.fake_model = fake_model;
        result.real_score_model = teacher_copy;
        result.generator_policy = make_policy(cfg.layer.budget_conditioning);
        return result;
    }

    // Joint: the generator learns to drop layers from scratch during step
    // distillation (budget path zero-initialized, schedule active).
    auto generator = std::make_shared<DitModel>(teacher.with_budget_path());
    auto teacher_copy = std::make_shared<DitModel>(teacher.clone());
    auto fake_model = std::make_shared<DitModel>(teacher.clone());
    StepDistillState state(generator, teacher_copy, fake_model, edm, cfg.step, stream.next_u64(),
                           make_policy(cfg.layer.budget_conditioning));
    result.step_trace = run_step_stage(state, data, cfg.step.iterations, stream, capture, result);
    result.generator = generator;
    result.fake_model = fake_model;
    result.real_score_model = teacher_copy;
    result.generator_policy = make_policy(cfg.layer.budget_conditioning);
    return result;
}

}  // namespace edmd
