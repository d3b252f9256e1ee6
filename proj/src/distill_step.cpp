#include "edmd/distill_step.hpp"

#include <cmath>

#include "edmd/errors.hpp"
#include "edmd/teacher.hpp"

namespace edmd {

std::string to_string(GanKind k) {
    return k == GanKind::LeastSquares ? "least_squares" : "non_saturating";
}

std::string to_string(NoiseSource s) {
    return s == NoiseSource::Train ? "tr" : "inf";
}

NoiseSource noise_source_from_string(const std::string& s) {
    if (s == "tr" || s == "train") return NoiseSource::Train;
    if (s == "inf" || s == "inference") return NoiseSource::Inference;
    throw ConfigError("unknown noise source '" + s + "' (want train|inference)");
}

GanKind gan_kind_from_string(const std::string& s) {
    if (s == "least_squares" || s == "ls") return GanKind::LeastSquares;
    if (s == "non_saturating" || s == "ns") return GanKind::NonSaturating;
    throw ConfigError("unknown gan kind '" + s + "' (want least_squares|non_saturating)");
}

std::string NoiseRouting::str() const {
    return to_string(gen) + "," + to_string(dmd) + "," + to_string(dsm) + "," + to_string(gan);
}

void StepDistillConfig::validate(int64_t tokens) const {
    if (update_ratio < 1) throw ConfigError("step_distill.update_ratio must be >= 1");
    if (nu1 < 0 || nu2 < 0) throw ConfigError("step_distill GAN weights must be >= 0");
    if (teacher_guidance < 0) throw ConfigError("step_distill.teacher_guidance must be >= 0");
    if (iterations < 1) throw ConfigError("step_distill.iterations must be >= 1");
    if (batch < 2) throw ConfigError("step_distill.batch must be >= 2");
    if (gen_rho < 1.0) throw ConfigError("step_distill.gen_rho must be >= 1");
    if (input_mode == InputMode::Discrete) {
        if (discrete_sigmas.empty()) throw ConfigError("step_distill: discrete input mode needs a sigma list");
        for (size_t i = 1; i < discrete_sigmas.size(); ++i) {
            if (discrete_sigmas[i] >= discrete_sigmas[i - 1]) {
                throw ConfigError("step_distill: discrete sigma list must be strictly decreasing");
            }
        }
    }
    if (disc_stages < 0 || (tokens >> disc_stages) < 1) {
        throw ConfigError("step_distill.disc_stages too deep for token count " + std::to_string(tokens));
    }
    if (collapse_guard.window < 1) throw ConfigError("step_distill.collapse_guard.window must be >= 1");
}

NoiseDistribution StepDistillConfig::distribution(NoiseSource src, const EdmConfig& edm) const {
    if (src == NoiseSource::Train) return NoiseDistribution::train_lognormal(edm);
    return NoiseDistribution::inference_power(edm, gen_rho);
}

NoiseDistribution StepDistillConfig::generator_input_distribution(const EdmConfig& edm) const {
    if (input_mode == InputMode::Discrete) return NoiseDistribution::discrete_levels(discrete_sigmas);
    return distribution(routing.gen, edm);
}

// ---- discriminator head --------------------------------------------------------

DiscriminatorHead::DiscriminatorHead(int64_t width, int64_t tokens, int64_t stages, uint64_t seed)
    : width_(width), tokens_(tokens), stages_(stages) {
    if (stages < 0) throw ConfigError("discriminator: stages must be >= 0");
    map_length_ = tokens;
    for (int64_t s = 0; s < stages; ++s) {
        if (map_length_ % 2 != 0) {
            throw ConfigError("discriminator: token count " + std::to_string(map_length_) + " not divisible for stage " +
                              std::to_string(s + 1));
        }
        map_length_ /= 2;
    }
    if (map_length_ < 1) throw ConfigError("discriminator: output map would be empty");
    SeededStream rng(seed);
    auto add_param = [&](const std::string& name, Tensor value) {
        params_.push_back(Var::leaf(std::move(value), true, name));
        names_.push_back(name);
    };
    auto gaussian_init = [&](Shape shape, double std_dev) {
        Tensor t = rng.gaussian(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) t[i] *= std_dev;
        return t;
    };
    double ws = 1.0 / std::sqrt(static_cast<double>(width));
    add_param("disc.cond.w", gaussian_init({width, width}, ws));
    add_param("disc.cond.b", Tensor::zeros({width}));
    char buf[48];
    for (int64_t s = 0; s < stages; ++s) {
        std::snprintf(buf, sizeof(buf), "disc.stage%02d.", static_cast<int>(s));
        add_param(std::string(buf) + "w", gaussian_init({2 * width, width}, 1.0 / std::sqrt(2.0 * width)));
        add_param(std::string(buf) + "b", Tensor::zeros({width}));
    }
    add_param("disc.out.w", gaussian_init({width, 1}, ws));
    add_param("disc.out.b", Tensor::zeros({1}));
}

Var DiscriminatorHead::score_map(const Var& hidden, double sigma) const {
    const Shape& hs = hidden.value().shape();
    if (hs.size() != 3 || hs[1] != tokens_ || hs[2] != width_) {
        throw ShapeError("discriminator: expected (B, " + std::to_string(tokens_) + ", " + std::to_string(width_) +
                         ") activations, got " + shape_str(hs));
    }
    int64_t b = hs[0];
    PreconditionCoeffs c{0, 0, 0, std::log(sigma) / 4.0};
    Tensor c_noise = Tensor::full({b}, c.c_noise);
    size_t pi = 0;
    Var cond_w = params_[pi++];
    Var cond_b = params_[pi++];
    Var cond = add(matmul(Var::constant(sinusoidal_embedding(c_noise, width_)), cond_w), cond_b);
    Var h = add(hidden, reshape(cond, {b, 1, width_}));
    int64_t t = tokens_;
    for (int64_t s = 0; s < stages_; ++s) {
        Var w = params_[pi++];
        Var bias = params_[pi++];
        h = silu(add(matmul(reshape(h, {b, t / 2, 2 * width_}), w), bias));
        t /= 2;
    }
    Var out_w = params_[pi++];
    Var out_b = params_[pi++];
    return reshape(add(matmul(h, out_w), out_b), {b, t});
}

// ---- loss pieces -----------------------------------------------------------------

GeneratorOutput generator_output(const DitDenoiser& generator, const Tensor& x_real,
                                 std::span<const Condition> cond, const NoiseDistribution& p_gen,
                                 SeededStream& stream) {
    GeneratorOutput out;
    out.sigma_gen = sample_sigma(p_gen, stream);
    Tensor noisy(x_real.shape());
    for (int64_t i = 0; i < noisy.size(); ++i) noisy[i] = x_real[i] + out.sigma_gen * stream.gaussian();
    DitDenoiser::Drop drop = generator.drop_for(out.sigma_gen);
    out.x_gen = generator.denoise_var_dropped(Var::constant(noisy), out.sigma_gen, cond, drop.executed, drop.budget)
                    .denoised;
    return out;
}

Tensor dmd_signal(const Denoiser& fake, const Denoiser& teacher, const Tensor& x_gen, double sigma,
                  double guidance_w, std::span<const Condition> cond, const Tensor& eps) {
    if (!same_shape(x_gen.shape(), eps.shape())) {
        throw ShapeError("dmd_signal: shapes " + shape_str(x_gen.shape()) + " vs " + shape_str(eps.shape()));
    }
    NoGradGuard guard;
    Tensor y(x_gen.shape());
    for (int64_t i = 0; i < y.size(); ++i) y[i] = x_gen[i] + sigma * eps[i];
    Tensor fake_pred = fake.denoise(y, sigma, cond);
    GuidanceConfig g{GuidanceMode::Cfg, guidance_w};
    Tensor real_pred = guided_denoise(teacher, y, sigma, cond, g);
    Tensor signal(x_gen.shape());
    for (int64_t i = 0; i < signal.size(); ++i) signal[i] = fake_pred[i] - real_pred[i];
    return signal;
}

Var dmd_surrogate_loss(const Var& x_gen, const Tensor& signal) {
    int64_t b = x_gen.value().dim(0);
    return scale(sum(mul(x_gen, Var::constant(signal))), 1.0 / static_cast<double>(b));
}

Var lsgan_generator_loss(const Var& fake_map) {
    return mean(square(shift(neg(fake_map), 1.0)));
}

Var lsgan_discriminator_loss(const Var& fake_map, const Var& real_map) {
    return add(mean(square(fake_map)), mean(square(shift(neg(real_map), 1.0))));
}

Var nsgan_generator_loss(const Var& fake_logits) {
    return mean(softplus(neg(fake_logits)));
}

Var nsgan_discriminator_loss(const Var& fake_logits, const Var& real_logits) {
    return add(mean(softplus(neg(real_logits))), mean(softplus(fake_logits)));
}

Var map_to_logits(const Var& score_map) {
    int64_t m = score_map.value().dim(1);
    Tensor avg({m, 1});
    for (int64_t i = 0; i < m; ++i) avg[i] = 1.0 / static_cast<double>(m);
    return matmul(score_map, Var::constant(avg));
}

// ---- state ------------------------------------------------------------------------

StepDistillState::StepDistillState(std::shared_ptr<DitModel> generator_model,
                                   std::shared_ptr<DitModel> teacher_model, std::shared_ptr<DitModel> fake_model,
                                   EdmConfig edm, StepDistillConfig cfg, uint64_t head_seed,
                                   DitDenoiser::DropPolicy generator_policy)
    : edm_(edm),
      cfg_(cfg),
      generator_model_(std::move(generator_model)),
      teacher_model_(std::move(teacher_model)),
      fake_model_(std::move(fake_model)),
      head_(generator_model_->config().width, generator_model_->config().tokens, cfg.disc_stages, head_seed),
      g1_(AdamConfig{cfg.lr_generator, 0.9, 0.999, 1e-8}),
      g2_(AdamConfig{cfg.lr_fake, 0.9, 0.999, 1e-8}) {
    cfg_.validate(generator_model_->config().tokens);
    generator_ = std::make_unique<DitDenoiser>(generator_model_, edm_);
    if (generator_policy) generator_->set_drop_policy(std::move(generator_policy));
    teacher_ = std::make_unique<DitDenoiser>(teacher_model_, edm_);
    fake_ = std::make_unique<DitDenoiser>(fake_model_, edm_);
}

bool StepDistillState::generator_turn_next() const {
    // Cycle of update_ratio + 1 iterations with the generator turn placed so
    // the counters never drift past update_ratio - 1.
    return iterations_ % (cfg_.update_ratio + 1) == cfg_.update_ratio - 1;
}

Var StepDistillState::disc_map(const Var& y, double sigma, std::span<const Condition> cond) const {
    auto res = fake_->denoise_var_dropped(y, sigma, cond, fake_model_->all_layers(), 0);
    return head_.score_map(res.hidden.back(), sigma);
}

double StepDistillState::windowed_real_accuracy() const {
    if (real_acc_window_.empty()) return 0.0;
    double acc = 0.0;
    for (double v : real_acc_window_) acc += v;
    return acc / static_cast<double>(real_acc_window_.size());
}

std::vector<Var> StepDistillState::fake_side_params() const {
    std::vector<Var> params(fake_model_->params().begin(), fake_model_->params().end());
    params.insert(params.end(), head_.params().begin(), head_.params().end());
    return params;
}

namespace {

void zero_params(std::span<const Var> params) {
    for (const Var& p : params) p.zero_grad();
}

double l2_over_batch(const Tensor& t) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
    return std::sqrt(acc) / static_cast<double>(t.dim(0));
}

}  // namespace

StepTraceRow StepDistillState::iteration(const Tensor& x_real, std::span<const Condition> cond,
                                         SeededStream& stream) {
    const int64_t b = x_real.dim(0);
    StepTraceRow row;
    row.iteration = iterations_;
    row.generator_turn = generator_turn_next();

    auto p_gen = cfg_.generator_input_distribution(edm_);
    double sigma_gen = sample_sigma(p_gen, stream);
    row.sigma_gen = sigma_gen;
    Tensor noisy(x_real.shape());
    for (int64_t i = 0; i < noisy.size(); ++i) noisy[i] = x_real[i] + sigma_gen * stream.gaussian();
    DitDenoiser::Drop drop = generator_->drop_for(sigma_gen);

    if (row.generator_turn) {
        // Generator turn: distribution-matching gradient plus the adversarial
        // term, stepped by g1.
        auto gen_res = generator_->denoise_var_dropped(Var::constant(noisy), sigma_gen, cond, drop.executed,
                                                       drop.budget);
        Var x_gen = gen_res.denoised;

        double sigma_dmd = sample_sigma(cfg_.distribution(cfg_.routing.dmd, edm_), stream);
        Tensor eps_dmd({b, x_real.dim(1)});
        for (int64_t i = 0; i < eps_dmd.size(); ++i) eps_dmd[i] = stream.gaussian();
        Var dmd_loss;
        Tensor signal;
        try {
            signal = dmd_signal(*fake_, *teacher_, x_gen.value(), sigma_dmd, cfg_.teacher_guidance, cond, eps_dmd);
            dmd_loss = dmd_surrogate_loss(x_gen, signal);
        } catch (const NumericError& e) {
            throw NumericError("distribution-matching loss at sigma=" + std::to_string(sigma_dmd) + ": " + e.what());
        }
        row.dmd_loss = dmd_loss.value().item();
        row.dmd_grad_norm = l2_over_batch(signal);

        double sigma_gan = sample_sigma(cfg_.distribution(cfg_.routing.gan, edm_), stream);
        Var gan_loss;
        try {
            Tensor eps_fake({b, x_real.dim(1)});
            for (int64_t i = 0; i < eps_fake.size(); ++i) eps_fake[i] = sigma_gan * stream.gaussian();
            Var z = add(x_gen, Var::constant(eps_fake));
            Var fake_map = disc_map(z, sigma_gan, cond);
            gan_loss = cfg_.gan_kind == GanKind::LeastSquares ? lsgan_generator_loss(fake_map)
                                                              : nsgan_generator_loss(map_to_logits(fake_map));
        } catch (const NumericError& e) {
            throw NumericError("adversarial generator loss at sigma=" + std::to_string(sigma_gan) + ": " + e.what());
        }
        row.gan_generator_loss = gan_loss.value().item();

        Var total = add(scale(dmd_loss, cfg_.dmd_weight), scale(gan_loss, cfg_.nu1));
        zero_params(generator_model_->params());
        zero_params(fake_model_->params());
        zero_params(head_.params());
        total.backward();
        g1_.step(generator_model_->params());
        ++gen_updates_;
    } else {
        // Discriminator / fake-score turn, stepped by g2 on detached
        // generator outputs.
        Tensor x_gen_detached;
        {
            NoGradGuard guard;
            x_gen_detached = generator_
                                 ->denoise_var_dropped(Var::constant(noisy), sigma_gen, cond, drop.executed,
                                                       drop.budget)
                                 .denoised.value();
        }
        double sigma_dsm = sample_sigma(cfg_.distribution(cfg_.routing.dsm, edm_), stream);
        Var dsm_loss_var;
        try {
            Tensor y(x_gen_detached.shape());
            for (int64_t i = 0; i < y.size(); ++i) y[i] = x_gen_detached[i] + sigma_dsm * stream.gaussian();
            Var xhat = fake_->denoise_var_dropped(Var::constant(y), sigma_dsm, cond, fake_model_->all_layers(), 0)
                           .denoised;
            Var residual = sub(Var::constant(x_gen_detached), xhat);
            dsm_loss_var = scale(sum(square(residual)),
                                 dsm_weight(sigma_dsm, edm_) / static_cast<double>(b));
        } catch (const NumericError& e) {
            throw NumericError("fake score matching loss at sigma=" + std::to_string(sigma_dsm) + ": " + e.what());
        }
        row.fake_dsm_loss = dsm_loss_var.value().item();

        double sigma_fake = sample_sigma(cfg_.distribution(cfg_.routing.gan, edm_), stream);
        double sigma_real = sample_sigma(cfg_.distribution(cfg_.routing.gan, edm_), stream);
        Var disc_loss;
        double real_acc = 0.0;
        try {
            Tensor yf(x_gen_detached.shape());
            for (int64_t i = 0; i < yf.size(); ++i) yf[i] = x_gen_detached[i] + sigma_fake * stream.gaussian();
            Tensor yr(x_real.shape());
            for (int64_t i = 0; i < yr.size(); ++i) yr[i] = x_real[i] + sigma_real * stream.gaussian();
            Var fake_map = disc_map(Var::constant(yf), sigma_fake, cond);
            Var real_map = disc_map(Var::constant(yr), sigma_real, cond);
            if (cfg_.gan_kind == GanKind::LeastSquares) {
                disc_loss = lsgan_discriminator_loss(fake_map, real_map);
            } else {
                disc_loss = nsgan_discriminator_loss(map_to_logits(fake_map), map_to_logits(real_map));
            }
            // Per-sample classification of the real batch (target 1).
            const Tensor& rm = real_map.value();
            int64_t m = rm.dim(1);
            for (int64_t r = 0; r < b; ++r) {
                double v = 0.0;
                for (int64_t j = 0; j < m; ++j) v += rm[r * m + j];
                v /= static_cast<double>(m);
                if (cfg_.gan_kind == GanKind::NonSaturating) v = 1.0 / (1.0 + std::exp(-v));
                real_acc += (v > 0.5) ? 1.0 : 0.0;
            }
            real_acc /= static_cast<double>(b);
        } catch (const NumericError& e) {
            throw NumericError("adversarial discriminator loss at sigma=" + std::to_string(sigma_fake) + ": " +
                               e.what());
        }
        row.gan_discriminator_loss = disc_loss.value().item();

        Var total = add(dsm_loss_var, scale(disc_loss, cfg_.nu2));
        auto params = fake_side_params();
        zero_params(params);
        zero_params(generator_model_->params());
        total.backward();
        g2_.step(params);
        ++fake_updates_;

        real_acc_window_.push_back(real_acc);
        while (static_cast<int64_t>(real_acc_window_.size()) > cfg_.collapse_guard.window) {
            real_acc_window_.pop_front();
        }
        if (cfg_.collapse_guard.enabled &&
            static_cast<int64_t>(real_acc_window_.size()) == cfg_.collapse_guard.window) {
            double acc = windowed_real_accuracy();
            if (acc > cfg_.collapse_guard.real_accuracy_threshold) {
                throw CollapseError("generator collapse guard: discriminator real accuracy " + std::to_string(acc) +
                                    " exceeded " + std::to_string(cfg_.collapse_guard.real_accuracy_threshold) +
                                    " over the last " + std::to_string(cfg_.collapse_guard.window) +
                                    " discriminator updates (iteration " + std::to_string(iterations_) + ")");
            }
        }
    }
    row.disc_real_accuracy = windowed_real_accuracy();
    ++iterations_;
    return row;
}

void StepDistillState::set_counters(int64_t iterations, int64_t gen_updates, int64_t fake_updates) {
    iterations_ = iterations;
    gen_updates_ = gen_updates;
    fake_updates_ = fake_updates;
}

std::vector<StepTraceRow> run_step_distillation(StepDistillState& state, const SyntheticDataset& data,
                                                int64_t iterations, SeededStream& stream) {
    std::vector<StepTraceRow> trace;
    trace.reserve(static_cast<size_t>(iterations));
    int64_t batch = state.config().batch;
    for (int64_t it = 0; it < iterations; ++it) {
        auto rows = draw_batch_rows(data.size(), batch, stream);
        Tensor x = data.gather(rows);
        auto cond = data.gather_conditions(rows);
        trace.push_back(state.iteration(x, cond, stream));
    }
    return trace;
}

}  // namespace edmd
