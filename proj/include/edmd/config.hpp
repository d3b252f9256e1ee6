#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edmd/dataset.hpp"
#include "edmd/diffusion.hpp"
#include "edmd/dit.hpp"
#include "edmd/distill_layer.hpp"
#include "edmd/distill_ls.hpp"
#include "edmd/distill_step.hpp"
#include "edmd/samplers.hpp"
#include "edmd/teacher.hpp"

namespace edmd {

struct EvalConfig {
    int64_t samples = 2048;
    int64_t knn_k = 3;
    double nominal_duration_s = 32.0;
    int64_t bench_warmups = 3;
    int64_t bench_repeats = 20;
    std::vector<int64_t> bench_steps{1, 2, 4, 8};
    std::vector<double> rejection_ratios{0.0, 0.25, 0.5, 0.75};
    std::vector<double> probe_sigmas{0.1, 0.5, 2.0, 10.0};
    std::vector<double> rho_values{7.0, 50.0, 1000.0};

    void validate() const;
};

// The whole experiment document. Every field has a default; a minimal "{}"
// config is valid.
struct ExperimentConfig {
    uint64_t seed = 1234;
    std::string out_dir = "runs/out";
    std::string checkpoint_path;  // input checkpoint for sample/eval/bench/...
    DatasetSpec dataset;
    EdmConfig edm;
    DitConfig model;  // tokens/categories/tempo_buckets derived from dataset
    TeacherTrainConfig teacher;
    StepDistillConfig step;
    LayerDistillConfig layer;
    // Combined pipeline knobs; the stage configs reuse `step` / `layer` with
    // the reduced budgets below.
    std::vector<int64_t> ls_reduced_budgets{12, 8, 8, 0, 0};
    LsOrder ls_order = LsOrder::LayerThenStep;
    ScoreInit ls_score_init = ScoreInit::OriginalTeacher;
    bool ls_allow_failure_modes = false;
    SamplerConfig sampler;
    EvalConfig eval;

    void validate() const;  // throws ConfigError listing every violation
    LsPipelineConfig ls_pipeline_config() const;
};

// Parses and validates; error messages name the offending document paths and
// collect every violation found.
ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig parse_config_file(const std::string& path);

// Canonical serialization: every key explicit, keys sorted.
std::string serialize_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical serialization.
uint64_t config_hash(const ExperimentConfig& cfg);

// Applies a dotted-path override (e.g. "sampler.steps" = "4") onto a JSON
// document and returns the updated text.
std::string apply_override(const std::string& json_text, const std::string& dotted_key, const std::string& value);

}  // namespace edmd
