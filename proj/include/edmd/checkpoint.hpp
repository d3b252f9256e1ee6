#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "edmd/dit.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

// Versioned binary container of named tensor sections with a payload
// checksum. Saves are atomic (temp file + rename).
struct CheckpointData {
    uint32_t version = 1;
    uint64_t config_hash = 0;
    std::string stage;
    int64_t step_count = 0;
    std::vector<std::pair<std::string, Tensor>> sections;

    const Tensor* find(const std::string& name) const;
    void add(const std::string& name, Tensor value);
    void add_scalar(const std::string& name, double value);
    double scalar(const std::string& name) const;  // throws if missing
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// Model helpers: geometry travels in meta.* sections so a model can be
// rebuilt from the file alone.
CheckpointData checkpoint_from_model(const DitModel& model, const std::string& stage, int64_t step_count,
                                     uint64_t config_hash);
DitConfig dit_config_from_checkpoint(const CheckpointData& data);
DitModel model_from_checkpoint(const CheckpointData& data);
// Strict by-name restore into an existing model.
void load_model_params(DitModel& model, const CheckpointData& data);

}  // namespace edmd
