#pragma once

#include <vector>

#include "edmd/adam.hpp"
#include "edmd/dataset.hpp"
#include "edmd/dit.hpp"
#include "edmd/rng.hpp"

namespace edmd {

struct TeacherTrainConfig {
    int64_t steps = 3000;
    int64_t batch = 128;
    double lr = 1e-3;
    double cond_dropout = 0.1;
    int64_t log_every = 50;
};

struct TrainLogRow {
    int64_t step = 0;
    double loss = 0.0;
};

// Draws a batch of row indices with replacement.
std::vector<int64_t> draw_batch_rows(int64_t dataset_size, int64_t batch, SeededStream& stream);

// One weighted-DSM training objective on a batch: per-sample noise levels,
// lambda weights, optional condition dropout already applied by the caller.
Var dsm_training_loss(const DitDenoiser& denoiser, const Tensor& x_real, const Tensor& sigma,
                      std::span<const Condition> cond, SeededStream& stream);

// Standard diffusion pretraining of the backbone on real data. Returns the
// logged loss curve.
std::vector<TrainLogRow> train_teacher(DitDenoiser& denoiser, const SyntheticDataset& data,
                                       const TeacherTrainConfig& cfg, SeededStream& stream);

// Monte-Carlo weighted-DSM validation loss of a denoiser at one noise level.
double validation_dsm_loss(const Denoiser& denoiser, const SyntheticDataset& data, double sigma, int64_t draws,
                           const EdmConfig& edm, SeededStream& stream);

}  // namespace edmd
