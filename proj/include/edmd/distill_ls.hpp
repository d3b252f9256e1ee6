#pragma once

#include <memory>
#include <string>
#include <vector>

#include "edmd/distill_layer.hpp"
#include "edmd/distill_step.hpp"

namespace edmd {

enum class LsOrder { LayerThenStep, StepThenLayer, Joint };
enum class ScoreInit { OriginalTeacher, LayerDistilled };

std::string to_string(LsOrder o);
std::string to_string(ScoreInit s);
LsOrder ls_order_from_string(const std::string& s);
ScoreInit score_init_from_string(const std::string& s);

struct LsPipelineConfig {
    LayerDistillConfig layer;  // reduced budgets by default
    StepDistillConfig step;
    ScoreInit score_init = ScoreInit::OriginalTeacher;
    LsOrder order = LsOrder::LayerThenStep;
    // Non-default order or score init reproduces a documented failure mode
    // and must be requested explicitly.
    bool allow_failure_modes = false;

    LsPipelineConfig();
    void validate() const;
};

struct LsPipelineResult {
    std::shared_ptr<DitModel> layer_stage_checkpoint;  // immutable stage-1 copy
    std::shared_ptr<DitModel> generator;
    std::shared_ptr<DitModel> fake_model;
    std::shared_ptr<DitModel> real_score_model;  // frozen; equals its init source
    DitDenoiser::DropPolicy generator_policy;
    std::vector<TrainLogRow> layer_log;
    std::vector<StepTraceRow> step_trace;
    bool collapse_tripped = false;
    std::string collapse_message;
};

// Layer distillation first, then step distillation with the real and fake
// score models initialized from the original teacher. Failure orderings run
// only behind allow_failure_modes; their collapse-guard trips are recorded in
// the result instead of thrown so the diagnostic traces survive.
LsPipelineResult run_ls_pipeline(const DitModel& teacher, const SyntheticDataset& data, const EdmConfig& edm,
                                 const LsPipelineConfig& cfg, SeededStream& stream);

}  // namespace edmd
