#pragma once

#include <string>
#include <vector>

#include "edmd/config.hpp"
#include "edmd/distill_step.hpp"

namespace edmd {

// Subcommand registry; every entry writes its outputs under cfg.out_dir.
std::vector<std::string> command_names();
bool is_command(const std::string& name);

// Runs one subcommand to completion. Throws on failure.
void run_command(const std::string& name, const ExperimentConfig& cfg);

// ---- resumable step-distillation state (checkpoint contract) ----------------

void save_step_state(const std::string& path, const StepDistillState& state, uint64_t config_hash);
// Restores parameters, optimizer moments and update counters into a state
// built with the same models and config. Refuses mismatched config hashes
// unless force is set.
void load_step_state(const std::string& path, StepDistillState& state, uint64_t config_hash, bool force = false);

}  // namespace edmd
