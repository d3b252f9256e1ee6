#include "edmd/teacher.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

std::vector<int64_t> draw_batch_rows(int64_t dataset_size, int64_t batch, SeededStream& stream) {
    std::vector<int64_t> rows(static_cast<size_t>(batch));
    for (auto& r : rows) r = static_cast<int64_t>(stream.next_u64() % static_cast<uint64_t>(dataset_size));
    return rows;
}

Var dsm_training_loss(const DitDenoiser& denoiser, const Tensor& x_real, const Tensor& sigma,
                      std::span<const Condition> cond, SeededStream& stream) {
    const int64_t b = x_real.dim(0);
    const int64_t d = x_real.dim(1);
    Tensor noisy(x_real.shape());
    for (int64_t r = 0; r < b; ++r) {
        for (int64_t j = 0; j < d; ++j) {
            noisy[r * d + j] = x_real[r * d + j] + sigma[r] * stream.gaussian();
        }
    }
    Var xhat = denoiser.denoise_var(Var::constant(noisy), sigma, cond);
    Var residual = sub(Var::constant(x_real), xhat);
    Tensor weights({b, 1});
    for (int64_t r = 0; r < b; ++r) weights[r] = dsm_weight(sigma[r], denoiser.edm());
    return scale(sum(mul(square(residual), Var::constant(weights))), 1.0 / static_cast<double>(b));
}

std::vector<TrainLogRow> train_teacher(DitDenoiser& denoiser, const SyntheticDataset& data,
                                       const TeacherTrainConfig& cfg, SeededStream& stream) {
    if (cfg.steps < 1 || cfg.batch < 1) throw ConfigError("teacher: steps and batch must be >= 1");
    auto model = denoiser.model();
    AdamState opt(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    auto train_dist = NoiseDistribution::train_lognormal(denoiser.edm());
    std::vector<TrainLogRow> log;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        auto rows = draw_batch_rows(data.size(), cfg.batch, stream);
        Tensor x = data.gather(rows);
        auto cond = data.gather_conditions(rows);
        for (auto& c : cond) {
            if (stream.uniform() < cfg.cond_dropout) c = null_condition(c);
        }
        Tensor sigma({cfg.batch});
        for (int64_t r = 0; r < cfg.batch; ++r) sigma[r] = sample_sigma(train_dist, stream);
        Var loss = dsm_training_loss(denoiser, x, sigma, cond, stream);
        for (const Var& p : model->params()) p.zero_grad();
        loss.backward();
        opt.step(model->params());
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push_back(TrainLogRow{step, loss.value().item()});
        }
    }
    return log;
}

double validation_dsm_loss(const Denoiser& denoiser, const SyntheticDataset& data, double sigma, int64_t draws,
                           const EdmConfig& edm, SeededStream& stream) {
    NoGradGuard guard;
    auto rows = draw_batch_rows(data.size(), draws, stream);
    Tensor x = data.gather(rows);
    auto cond = data.gather_conditions(rows);
    Tensor eps({draws, data.dim()});
    for (int64_t i = 0; i < eps.size(); ++i) eps[i] = stream.gaussian();
    return dsm_loss(denoiser, x, sigma, eps, edm, cond);
}

}  // namespace edmd
