#include "edmd/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "edmd/checkpoint.hpp"
#include "edmd/csv.hpp"
#include "edmd/distill_layer.hpp"
#include "edmd/distill_ls.hpp"
#include "edmd/errors.hpp"
#include "edmd/metrics.hpp"
#include "edmd/samplers.hpp"
#include "edmd/teacher.hpp"

namespace edmd {

namespace {

namespace fs = std::filesystem;

// Stable stream ids per purpose; every command derives its randomness from
// (config seed, purpose), so runs are pure functions of (config, seed).
enum StreamId : uint64_t {
    kTrainData = 1,
    kEvalData = 2,
    kTeacherTraining = 3,
    kStepDistill = 4,
    kLayerDistill = 5,
    kLsPipeline = 6,
    kSampling = 7,
    kEvalMisc = 8,
    kAblation = 9,
    kVarianceProbe = 10,
};

SeededStream purpose_stream(const ExperimentConfig& cfg, uint64_t id) {
    return SeededStream(cfg.seed).child(id);
}

std::string out_path(const ExperimentConfig& cfg, const std::string& file) {
    return (fs::path(cfg.out_dir) / file).string();
}

void ensure_out_dir(const ExperimentConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "': " + ec.message());
}

SyntheticDataset train_data(const ExperimentConfig& cfg) {
    auto stream = purpose_stream(cfg, kTrainData);
    return generate_dataset(cfg.dataset, stream);
}

SyntheticDataset eval_data(const ExperimentConfig& cfg) {
    DatasetSpec spec = cfg.dataset;
    spec.sample_count = cfg.eval.samples;
    auto stream = purpose_stream(cfg, kEvalData);
    return generate_dataset(spec, stream);
}

std::string model_id(const std::string& stage, const ExperimentConfig& cfg) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%08llx", static_cast<unsigned long long>(config_hash(cfg) & 0xffffffffULL));
    return stage + "@" + buf;
}

class MetricsSink {
  public:
    MetricsSink(const ExperimentConfig& cfg, const std::string& file)
        : writer_(out_path(cfg, file), "metrics.v1",
                  {"stage", "model_id", "sampler", "steps", "rho", "seed", "metric", "value", "wall_clock_s"}),
          seed_(cfg.seed) {}

    void add(const std::string& stage, const std::string& id, const std::string& sampler, int64_t steps, double rho,
             const std::string& metric, double value, const std::string& wall = "") {
        writer_.row({stage, id, sampler, CsvWriter::num(steps), CsvWriter::num(rho),
                     CsvWriter::num(static_cast<int64_t>(seed_)), metric, CsvWriter::num(value), wall});
    }

  private:
    CsvWriter writer_;
    uint64_t seed_;
};

std::string teacher_checkpoint_path(const ExperimentConfig& cfg) {
    if (!cfg.checkpoint_path.empty()) return cfg.checkpoint_path;
    return out_path(cfg, "teacher.ckpt");
}

std::shared_ptr<DitModel> load_model(const std::string& path) {
    return std::make_shared<DitModel>(model_from_checkpoint(load_checkpoint(path)));
}

double condition_consistency(const GmmOracle& oracle, const Tensor& samples, std::span<const Condition> cond) {
    auto map = oracle.map_component(samples);
    int64_t hits = 0;
    for (size_t i = 0; i < map.size(); ++i) {
        if (map[i] == cond[i].category) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(map.size());
}

struct QualityMetrics {
    double mmd = 0.0;
    double frechet = 0.0;
    double density = 0.0;
    double recall = 0.0;
    double coverage = 0.0;
    double consistency = -1.0;  // gmm datasets only
};

QualityMetrics quality_metrics(const ExperimentConfig& cfg, const SyntheticDataset& reference,
                               const Tensor& samples, std::span<const Condition> cond) {
    QualityMetrics q;
    double bw = median_heuristic_bandwidth(reference.samples, samples);
    q.mmd = mmd_rbf(reference.samples, samples, bw);
    q.frechet = frechet_gauss(reference.samples, samples);
    auto pr = prdc(reference.samples, samples, cfg.eval.knn_k);
    q.density = pr.density;
    q.recall = pr.recall;
    q.coverage = pr.coverage;
    if (reference.oracle) q.consistency = condition_consistency(*reference.oracle, samples, cond);
    return q;
}

void emit_quality(MetricsSink& sink, const std::string& stage, const std::string& id, const SamplerConfig& sampler,
                  const QualityMetrics& q) {
    std::string name = to_string(sampler.kind);
    sink.add(stage, id, name, sampler.steps, sampler.rho, "mmd", q.mmd);
    sink.add(stage, id, name, sampler.steps, sampler.rho, "frechet_gauss", q.frechet);
    sink.add(stage, id, name, sampler.steps, sampler.rho, "density", q.density);
    sink.add(stage, id, name, sampler.steps, sampler.rho, "recall", q.recall);
    sink.add(stage, id, name, sampler.steps, sampler.rho, "coverage", q.coverage);
    if (q.consistency >= 0) {
        sink.add(stage, id, name, sampler.steps, sampler.rho, "condition_consistency", q.consistency);
    }
}

DitDenoiser::DropPolicy policy_for_stage(const ExperimentConfig& cfg, const std::string& stage,
                                         const DitModel& model) {
    if (stage == "distill-layer") {
        return make_drop_policy(cfg.layer.schedule, model.config().depth, cfg.layer.budget_conditioning, cfg.edm);
    }
    if (stage == "distill-ls") {
        DropSchedule reduced = cfg.layer.schedule;
        reduced.budgets = cfg.ls_reduced_budgets;
        return make_drop_policy(reduced, model.config().depth, cfg.layer.budget_conditioning, cfg.edm);
    }
    return nullptr;
}

// Evaluation conditions come from the held-out dataset so metric comparisons
// are condition-aligned.
Tensor generate_eval_samples(const ExperimentConfig& cfg, const DitDenoiser& denoiser,
                             const SyntheticDataset& reference, const SamplerConfig& sampler) {
    return sample(denoiser, sampler, cfg.edm, reference.dim(), reference.conditions);
}

void write_trace_csv(const std::string& path, const std::vector<StepTraceRow>& trace) {
    CsvWriter w(path, "trace.v1",
                {"iteration", "turn", "sigma_gen", "dmd_loss", "gan_generator_loss", "fake_dsm_loss",
                 "gan_discriminator_loss", "dmd_grad_norm", "disc_real_accuracy"});
    for (const auto& r : trace) {
        w.row({CsvWriter::num(r.iteration), r.generator_turn ? "generator" : "fake", CsvWriter::num(r.sigma_gen),
               CsvWriter::num(r.dmd_loss), CsvWriter::num(r.gan_generator_loss), CsvWriter::num(r.fake_dsm_loss),
               CsvWriter::num(r.gan_discriminator_loss), CsvWriter::num(r.dmd_grad_norm),
               CsvWriter::num(r.disc_real_accuracy)});
    }
}

void write_training_log(const std::string& path, const std::vector<TrainLogRow>& log) {
    CsvWriter w(path, "training.v1", {"step", "loss"});
    for (const auto& r : log) w.row({CsvWriter::num(r.step), CsvWriter::num(r.loss)});
}

// ---- commands -------------------------------------------------------------------

void cmd_train_teacher(const ExperimentConfig& cfg) {
    auto data = train_data(cfg);
    auto model = std::make_shared<DitModel>(cfg.model, SeededStream(cfg.seed).child(100).next_u64());
    DitDenoiser denoiser(model, cfg.edm);
    auto stream = purpose_stream(cfg, kTeacherTraining);
    auto log = train_teacher(denoiser, data, cfg.teacher, stream);
    write_training_log(out_path(cfg, "teacher_log.csv"), log);
    save_checkpoint(out_path(cfg, "teacher.ckpt"),
                    checkpoint_from_model(*model, "teacher", cfg.teacher.steps, config_hash(cfg)));

    MetricsSink sink(cfg, "metrics.csv");
    std::string id = model_id("teacher", cfg);
    auto reference = eval_data(cfg);
    // Validation DSM against the analytic oracle where one exists.
    auto vstream = purpose_stream(cfg, kEvalMisc);
    for (double sigma : cfg.eval.probe_sigmas) {
        SeededStream vs = vstream.child(static_cast<uint64_t>(sigma * 1e6));
        SeededStream vs2 = vs;
        double net_loss = validation_dsm_loss(denoiser, reference, sigma, std::min<int64_t>(reference.size(), 4096),
                                              cfg.edm, vs);
        sink.add("teacher", id, "-", 0, 0.0, "val_dsm@" + CsvWriter::num(sigma), net_loss);
        if (reference.oracle) {
            GmmDenoiser oracle_den(*reference.oracle);
            double oracle_loss = validation_dsm_loss(oracle_den, reference, sigma,
                                                     std::min<int64_t>(reference.size(), 4096), cfg.edm, vs2);
            sink.add("teacher", id, "-", 0, 0.0, "oracle_dsm@" + CsvWriter::num(sigma), oracle_loss);
        }
    }
    Tensor samples = generate_eval_samples(cfg, denoiser, reference, cfg.sampler);
    emit_quality(sink, "teacher", id, cfg.sampler, quality_metrics(cfg, reference, samples, reference.conditions));
}

void cmd_distill_step(const ExperimentConfig& cfg) {
    auto teacher_model = load_model(teacher_checkpoint_path(cfg));
    auto generator = std::make_shared<DitModel>(teacher_model->clone());
    auto fake = std::make_shared<DitModel>(teacher_model->clone());
    auto stream = purpose_stream(cfg, kStepDistill);
    StepDistillState state(generator, teacher_model, fake, cfg.edm, cfg.step, stream.next_u64());
    auto data = train_data(cfg);
    auto trace = run_step_distillation(state, data, cfg.step.iterations, stream);
    write_trace_csv(out_path(cfg, "step_trace.csv"), trace);
    save_checkpoint(out_path(cfg, "generator_step.ckpt"),
                    checkpoint_from_model(*generator, "distill-step", state.iterations_done(), config_hash(cfg)));
    save_step_state(out_path(cfg, "step_state.ckpt"), state, config_hash(cfg));

    MetricsSink sink(cfg, "metrics.csv");
    auto reference = eval_data(cfg);
    SamplerConfig pp;
    pp.kind = SamplerKind::PingPong;
    pp.steps = 4;
    pp.rho = cfg.sampler.rho;
    pp.seed = cfg.seed;
    Tensor samples = generate_eval_samples(cfg, state.generator(), reference, pp);
    emit_quality(sink, "distill-step", model_id("distill-step", cfg), pp,
                 quality_metrics(cfg, reference, samples, reference.conditions));
}

void cmd_distill_layer(const ExperimentConfig& cfg) {
    auto teacher_model = load_model(teacher_checkpoint_path(cfg));
    std::shared_ptr<DitModel> model;
    if (cfg.layer.budget_conditioning && !teacher_model->config().budget_path) {
        model = std::make_shared<DitModel>(teacher_model->with_budget_path());
    } else {
        model = std::make_shared<DitModel>(teacher_model->clone());
    }
    DitDenoiser denoiser(model, cfg.edm);
    auto data = train_data(cfg);
    auto stream = purpose_stream(cfg, kLayerDistill);
    auto log = train_layer_distill(denoiser, data, cfg.layer, stream);
    write_training_log(out_path(cfg, "layer_log.csv"), log);
    save_checkpoint(out_path(cfg, "layer.ckpt"),
                    checkpoint_from_model(*model, "distill-layer", cfg.layer.steps, config_hash(cfg)));

    MetricsSink sink(cfg, "metrics.csv");
    std::string id = model_id("distill-layer", cfg);
    auto reference = eval_data(cfg);
    const int64_t depth = model->config().depth;
    auto policy = make_drop_policy(cfg.layer.schedule, depth, cfg.layer.budget_conditioning, cfg.edm);

    // Per-quintile validation: dropped model vs the full teacher at the
    // bucket-center noise levels.
    DitDenoiser dropped(model, cfg.edm);
    dropped.set_drop_policy(policy);
    DitDenoiser teacher_full(teacher_model, cfg.edm);
    for (int q = 0; q < 5; ++q) {
        double u = (static_cast<double>(q) + 0.5) / 5.0;
        double sigma = sigma_from_u(u, cfg.layer.schedule.rho, cfg.edm.sigma_min, cfg.edm.sigma_max);
        SeededStream vs = purpose_stream(cfg, kEvalMisc).child(static_cast<uint64_t>(q));
        SeededStream vs2 = vs;
        int64_t draws = std::min<int64_t>(reference.size(), 2048);
        double dropped_loss = validation_dsm_loss(dropped, reference, sigma, draws, cfg.edm, vs);
        double full_loss = validation_dsm_loss(teacher_full, reference, sigma, draws, cfg.edm, vs2);
        sink.add("distill-layer", id, "-", 0, 0.0, "val_dsm_dropped@q" + CsvWriter::num(static_cast<int64_t>(q)),
                 dropped_loss);
        sink.add("distill-layer", id, "-", 0, 0.0, "val_dsm_full@q" + CsvWriter::num(static_cast<int64_t>(q)),
                 full_loss);
    }
    SamplerConfig sampler = cfg.sampler;
    Tensor samples = generate_eval_samples(cfg, dropped, reference, sampler);
    emit_quality(sink, "distill-layer", id, sampler, quality_metrics(cfg, reference, samples, reference.conditions));
}

void cmd_distill_ls(const ExperimentConfig& cfg) {
    auto teacher_model = load_model(teacher_checkpoint_path(cfg));
    auto data = train_data(cfg);
    auto stream = purpose_stream(cfg, kLsPipeline);
    auto result = run_ls_pipeline(*teacher_model, data, cfg.edm, cfg.ls_pipeline_config(), stream);
    write_trace_csv(out_path(cfg, "ls_step_trace.csv"), result.step_trace);
    write_training_log(out_path(cfg, "ls_layer_log.csv"), result.layer_log);
    if (result.layer_stage_checkpoint) {
        save_checkpoint(out_path(cfg, "layer_stage.ckpt"),
                        checkpoint_from_model(*result.layer_stage_checkpoint, "distill-layer", cfg.layer.steps,
                                              config_hash(cfg)));
    }
    save_checkpoint(out_path(cfg, "generator_ls.ckpt"),
                    checkpoint_from_model(*result.generator, "distill-ls", cfg.step.iterations, config_hash(cfg)));

    MetricsSink sink(cfg, "metrics.csv");
    std::string id = model_id("distill-ls", cfg);
    auto reference = eval_data(cfg);
    DitDenoiser generator(result.generator, cfg.edm);
    if (result.generator_policy) generator.set_drop_policy(result.generator_policy);
    SamplerConfig pp;
    pp.kind = SamplerKind::PingPong;
    pp.steps = 4;
    pp.rho = cfg.sampler.rho;
    pp.seed = cfg.seed;
    Tensor samples = generate_eval_samples(cfg, generator, reference, pp);
    emit_quality(sink, "distill-ls", id, pp, quality_metrics(cfg, reference, samples, reference.conditions));
    sink.add("distill-ls", id, "-", 0, 0.0, "collapse_guard_tripped", result.collapse_tripped ? 1.0 : 0.0);
}

struct LoadedModel {
    std::shared_ptr<DitModel> model;
    std::string stage;
};

LoadedModel model_for_inference(const ExperimentConfig& cfg) {
    if (cfg.checkpoint_path.empty()) {
        throw ConfigError("this command needs checkpoint_path (or --checkpoint) pointing at a model checkpoint");
    }
    auto data = load_checkpoint(cfg.checkpoint_path);
    LoadedModel out;
    out.model = std::make_shared<DitModel>(model_from_checkpoint(data));
    out.stage = data.stage;
    return out;
}

DitDenoiser denoiser_for_inference(const ExperimentConfig& cfg, const LoadedModel& loaded) {
    DitDenoiser den(loaded.model, cfg.edm);
    auto policy = policy_for_stage(cfg, loaded.stage, *loaded.model);
    if (policy) den.set_drop_policy(policy);
    return den;
}

void cmd_sample(const ExperimentConfig& cfg) {
    auto loaded = model_for_inference(cfg);
    DitDenoiser den = denoiser_for_inference(cfg, loaded);
    auto reference = eval_data(cfg);
    Tensor samples = generate_eval_samples(cfg, den, reference, cfg.sampler);
    std::vector<std::string> cols{"index", "category", "tempo"};
    for (int64_t d = 0; d < reference.dim(); ++d) cols.push_back("x" + CsvWriter::num(d));
    CsvWriter w(out_path(cfg, "samples.csv"), "samples.v1", cols);
    for (int64_t i = 0; i < samples.dim(0); ++i) {
        std::vector<std::string> row{CsvWriter::num(i), CsvWriter::num(static_cast<int64_t>(reference.conditions[static_cast<size_t>(i)].category)),
                                     CsvWriter::num(static_cast<int64_t>(reference.conditions[static_cast<size_t>(i)].tempo))};
        for (int64_t d = 0; d < samples.dim(1); ++d) row.push_back(CsvWriter::num(samples[i * samples.dim(1) + d]));
        w.row(row);
    }
}

void cmd_eval(const ExperimentConfig& cfg) {
    auto loaded = model_for_inference(cfg);
    DitDenoiser den = denoiser_for_inference(cfg, loaded);
    auto reference = eval_data(cfg);
    Tensor samples = generate_eval_samples(cfg, den, reference, cfg.sampler);
    MetricsSink sink(cfg, "metrics.csv");
    emit_quality(sink, loaded.stage, model_id(loaded.stage, cfg), cfg.sampler,
                 quality_metrics(cfg, reference, samples, reference.conditions));

    // Rejection sampling against the conditional-likelihood ranking score.
    if (reference.oracle) {
        std::vector<double> scores(static_cast<size_t>(samples.dim(0)));
        for (int64_t i = 0; i < samples.dim(0); ++i) {
            int cat = reference.conditions[static_cast<size_t>(i)].category;
            scores[static_cast<size_t>(i)] =
                reference.oracle->component_loglik(samples.data() + i * samples.dim(1), cat, 0.0);
        }
        for (double r : cfg.eval.rejection_ratios) {
            auto kept = rejection_sample(scores, r);
            double mean_score = 0.0;
            int64_t hits = 0;
            auto map = reference.oracle->map_component(samples);
            for (int64_t idx : kept) {
                mean_score += scores[static_cast<size_t>(idx)];
                if (map[static_cast<size_t>(idx)] == reference.conditions[static_cast<size_t>(idx)].category) ++hits;
            }
            mean_score /= static_cast<double>(kept.size());
            double frac = static_cast<double>(hits) / static_cast<double>(kept.size());
            sink.add(loaded.stage, model_id(loaded.stage, cfg), to_string(cfg.sampler.kind), cfg.sampler.steps,
                     cfg.sampler.rho, "rejection_mean_score@r" + CsvWriter::num(r), mean_score);
            sink.add(loaded.stage, model_id(loaded.stage, cfg), to_string(cfg.sampler.kind), cfg.sampler.steps,
                     cfg.sampler.rho, "rejection_consistency@r" + CsvWriter::num(r), frac);
        }
    }
}

double median_latency_seconds(const std::function<void()>& fn, int64_t warmups, int64_t repeats) {
    for (int64_t i = 0; i < warmups; ++i) fn();
    std::vector<double> times;
    times.reserve(static_cast<size_t>(repeats));
    for (int64_t i = 0; i < repeats; ++i) {
        auto start = std::chrono::steady_clock::now();
        fn();
        auto stop = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(stop - start).count());
    }
    std::nth_element(times.begin(), times.begin() + static_cast<int64_t>(times.size() / 2), times.end());
    return times[times.size() / 2];
}

void cmd_bench(const ExperimentConfig& cfg) {
    LoadedModel loaded;
    if (!cfg.checkpoint_path.empty()) {
        loaded = model_for_inference(cfg);
    } else {
        loaded.model = std::make_shared<DitModel>(cfg.model, SeededStream(cfg.seed).child(100).next_u64());
        loaded.stage = "untrained";
    }
    DitDenoiser den = denoiser_for_inference(cfg, loaded);
    CsvWriter w(out_path(cfg, "bench.csv"), "bench.v1",
                {"mode", "stage", "steps", "budget", "latency_ms", "rtf", "duration_s"});
    std::vector<Condition> one{Condition{0, 0}};
    for (int64_t steps : cfg.eval.bench_steps) {
        SamplerConfig sampler = cfg.sampler;
        sampler.steps = static_cast<int>(steps);
        double latency = median_latency_seconds(
            [&] { sample(den, sampler, cfg.edm, cfg.dataset.dim(), one); }, cfg.eval.bench_warmups,
            cfg.eval.bench_repeats);
        double factor = rtf(cfg.eval.nominal_duration_s, 1, latency);
        w.row({"sampler", loaded.stage, CsvWriter::num(steps), "", CsvWriter::num(latency * 1e3),
               CsvWriter::num(factor), CsvWriter::num(cfg.eval.nominal_duration_s)});
    }
    // Per-budget forward timing over the distinct scheduled budgets.
    std::vector<int64_t> budgets = cfg.layer.schedule.scaled_budgets(loaded.model->config().depth);
    std::sort(budgets.begin(), budgets.end());
    budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
    SeededStream brng = purpose_stream(cfg, kEvalMisc);
    Tensor x = brng.gaussian(Shape{16, cfg.dataset.dim()});
    std::vector<Condition> cond(16, Condition{0, 0});
    const bool conditioned = loaded.model->config().budget_path;
    for (int64_t b : budgets) {
        auto executed = executed_for_budget(b, loaded.model->config().depth, cfg.layer.schedule.variant);
        double latency = median_latency_seconds(
            [&] {
                NoGradGuard guard;
                den.denoise_var_dropped(Var::constant(x), 1.0, cond, executed, conditioned ? static_cast<int>(b) : 0);
            },
            cfg.eval.bench_warmups, std::max<int64_t>(cfg.eval.bench_repeats, 100));
        w.row({"forward", loaded.stage, "", CsvWriter::num(b), CsvWriter::num(latency * 1e3), "",
               CsvWriter::num(cfg.eval.nominal_duration_s)});
    }
}

void cmd_probe_variance(const ExperimentConfig& cfg) {
    LoadedModel loaded;
    if (!cfg.checkpoint_path.empty()) {
        loaded = model_for_inference(cfg);
    } else {
        loaded.model = std::make_shared<DitModel>(cfg.model, SeededStream(cfg.seed).child(100).next_u64());
        loaded.stage = "untrained";
    }
    DitDenoiser den(loaded.model, cfg.edm);
    auto reference = eval_data(cfg);
    int64_t rows = std::min<int64_t>(reference.size(), 256);
    std::vector<int64_t> idx(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) idx[static_cast<size_t>(i)] = i;
    Tensor batch = reference.gather(idx);
    auto cond = reference.gather_conditions(idx);
    auto stream = purpose_stream(cfg, kVarianceProbe);
    auto profile = variance_profile(den, batch, cond, cfg.eval.probe_sigmas, stream);
    CsvWriter w(out_path(cfg, "variance_profile.csv"), "variance.v1", {"stage", "sigma", "layer", "variance"});
    for (size_t s = 0; s < profile.sigma_levels.size(); ++s) {
        for (size_t l = 0; l < profile.variance[s].size(); ++l) {
            w.row({loaded.stage, CsvWriter::num(profile.sigma_levels[s]), CsvWriter::num(static_cast<int64_t>(l + 1)),
                   CsvWriter::num(profile.variance[s][l])});
        }
    }
    CsvWriter ws(out_path(cfg, "variance_summary.csv"), "variance_summary.v1",
                 {"stage", "sigma", "last_to_median_ratio"});
    for (size_t s = 0; s < profile.sigma_levels.size(); ++s) {
        ws.row({loaded.stage, CsvWriter::num(profile.sigma_levels[s]), CsvWriter::num(profile.last_to_median_ratio(s))});
    }
}

void cmd_sweep_rho(const ExperimentConfig& cfg) {
    auto loaded = model_for_inference(cfg);
    DitDenoiser den = denoiser_for_inference(cfg, loaded);
    auto reference = eval_data(cfg);
    int64_t n = std::min<int64_t>(reference.size(), 256);
    std::vector<Condition> cond(reference.conditions.begin(), reference.conditions.begin() + n);

    CsvWriter sched_csv(out_path(cfg, "rho_schedules.csv"), "rho_schedule.v1", {"rho", "index", "sigma"});
    std::vector<Tensor> per_rho;
    for (double rho : cfg.eval.rho_values) {
        auto levels = inference_schedule(cfg.sampler.steps, rho, cfg.edm.sigma_min, cfg.edm.sigma_max);
        for (size_t i = 0; i < levels.size(); ++i) {
            sched_csv.row({CsvWriter::num(rho), CsvWriter::num(static_cast<int64_t>(i)), CsvWriter::num(levels[i])});
        }
        SamplerConfig sampler = cfg.sampler;
        sampler.kind = SamplerKind::PingPong;
        sampler.rho = rho;
        sampler.seed = cfg.seed;  // shared latents across rho
        per_rho.push_back(sample(den, sampler, cfg.edm, reference.dim(), cond));
    }
    CsvWriter dist_csv(out_path(cfg, "rho_sweep.csv"), "rho_sweep.v1", {"rho_a", "rho_b", "mean_pair_distance"});
    int64_t d = reference.dim();
    for (size_t a = 0; a < per_rho.size(); ++a) {
        for (size_t b = a + 1; b < per_rho.size(); ++b) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double sq = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double diff = per_rho[a][i * d + j] - per_rho[b][i * d + j];
                    sq += diff * diff;
                }
                acc += std::sqrt(sq);
            }
            dist_csv.row({CsvWriter::num(cfg.eval.rho_values[a]), CsvWriter::num(cfg.eval.rho_values[b]),
                          CsvWriter::num(acc / static_cast<double>(n))});
        }
    }
}

void cmd_ablate_noise_routing(const ExperimentConfig& cfg) {
    auto teacher_model = load_model(teacher_checkpoint_path(cfg));
    auto data = train_data(cfg);
    auto reference = eval_data(cfg);

    struct Cell {
        NoiseRouting routing;
        GanKind kind;
    };
    auto r = [](NoiseSource g, NoiseSource d, NoiseSource s, NoiseSource a) {
        return NoiseRouting{g, d, s, a};
    };
    const NoiseSource I = NoiseSource::Inference, T = NoiseSource::Train;
    std::vector<Cell> cells{
        {r(I, I, I, I), GanKind::LeastSquares}, {r(I, I, T, I), GanKind::LeastSquares},
        {r(I, I, T, T), GanKind::LeastSquares}, {r(I, T, T, I), GanKind::LeastSquares},
        {r(I, T, I, T), GanKind::LeastSquares}, {r(I, T, T, T), GanKind::LeastSquares},
        {r(T, T, T, T), GanKind::LeastSquares}, {r(I, T, I, T), GanKind::NonSaturating},
        {r(I, T, T, T), GanKind::NonSaturating}, {r(T, T, T, T), GanKind::NonSaturating},
    };

    CsvWriter w(out_path(cfg, "ablate_noise_routing.csv"), "ablation.v1",
                {"routing", "gan_kind", "mmd", "frechet", "consistency"});
    auto root = purpose_stream(cfg, kAblation);
    for (size_t i = 0; i < cells.size(); ++i) {
        StepDistillConfig run_cfg = cfg.step;
        run_cfg.routing = cells[i].routing;
        run_cfg.gan_kind = cells[i].kind;
        auto generator = std::make_shared<DitModel>(teacher_model->clone());
        auto fake = std::make_shared<DitModel>(teacher_model->clone());
        SeededStream stream = root.child(i);
        StepDistillState state(generator, teacher_model, fake, cfg.edm, run_cfg, stream.next_u64());
        run_step_distillation(state, data, run_cfg.iterations, stream);

        SamplerConfig pp;
        pp.kind = SamplerKind::PingPong;
        pp.steps = 4;
        pp.rho = cfg.sampler.rho;
        pp.seed = cfg.seed;
        Tensor samples = generate_eval_samples(cfg, state.generator(), reference, pp);
        auto q = quality_metrics(cfg, reference, samples, reference.conditions);
        w.row({cells[i].routing.str(), to_string(cells[i].kind), CsvWriter::num(q.mmd), CsvWriter::num(q.frechet),
               CsvWriter::num(q.consistency)});
        w.flush();
    }
}

void cmd_ablate_layer(const ExperimentConfig& cfg) {
    auto teacher_model = load_model(teacher_checkpoint_path(cfg));
    auto data = train_data(cfg);
    auto reference = eval_data(cfg);

    struct VariantSpec {
        std::string name;
        DropVariant variant;
        bool budget_cond;
        double st_weight;
    };
    std::vector<VariantSpec> variants{
        {"ase", DropVariant::BaselineBack, false, 0.0},
        {"ase+shift", DropVariant::ShiftedKeepLast, false, 0.0},
        {"ase+budget", DropVariant::BaselineBack, true, 0.0},
        {"ase+self_teacher", DropVariant::BaselineBack, false, cfg.layer.self_teacher_weight},
        {"full", DropVariant::ShiftedKeepLast, true, cfg.layer.self_teacher_weight},
    };

    CsvWriter w(out_path(cfg, "ablate_layer.csv"), "layer_ablation.v1",
                {"variant", "shift", "budget_conditioning", "self_teacher", "steps", "mmd", "frechet", "val_dsm"});
    auto root = purpose_stream(cfg, kAblation).child(777);
    for (size_t i = 0; i < variants.size(); ++i) {
        const auto& v = variants[i];
        LayerDistillConfig run_cfg = cfg.layer;
        run_cfg.schedule.variant = v.variant;
        run_cfg.budget_conditioning = v.budget_cond;
        run_cfg.self_teacher_weight = v.st_weight;
        std::shared_ptr<DitModel> model;
        if (v.budget_cond) {
            model = std::make_shared<DitModel>(teacher_model->with_budget_path());
        } else {
            model = std::make_shared<DitModel>(teacher_model->clone());
        }
        DitDenoiser den(model, cfg.edm);
        SeededStream stream = root.child(i);
        train_layer_distill(den, data, run_cfg, stream);

        auto policy = make_drop_policy(run_cfg.schedule, model->config().depth, v.budget_cond, cfg.edm);
        DitDenoiser dropped(model, cfg.edm);
        dropped.set_drop_policy(policy);
        SeededStream vrng = purpose_stream(cfg, kEvalMisc).child(1000 + i);
        double val = 0.0;
        for (double sigma : {0.3, 1.0}) {
            val += validation_dsm_loss(dropped, reference, sigma, std::min<int64_t>(reference.size(), 1024), cfg.edm,
                                       vrng);
        }
        for (int64_t steps : cfg.eval.bench_steps) {
            SamplerConfig sampler = cfg.sampler;
            sampler.kind = SamplerKind::Dpm2S;
            sampler.steps = static_cast<int>(steps);
            Tensor samples = generate_eval_samples(cfg, dropped, reference, sampler);
            auto q = quality_metrics(cfg, reference, samples, reference.conditions);
            w.row({v.name, v.variant == DropVariant::ShiftedKeepLast ? "1" : "0", v.budget_cond ? "1" : "0",
                   CsvWriter::num(v.st_weight), CsvWriter::num(steps), CsvWriter::num(q.mmd),
                   CsvWriter::num(q.frechet), CsvWriter::num(val)});
        }
        w.flush();
    }
}

}  // namespace

std::vector<std::string> command_names() {
    return {"train-teacher", "distill-step", "distill-layer",        "distill-ls",  "sample",
            "eval",          "bench",        "probe-variance",       "sweep-rho",   "ablate-noise-routing",
            "ablate-layer"};
}

bool is_command(const std::string& name) {
    auto names = command_names();
    return std::find(names.begin(), names.end(), name) != names.end();
}

void run_command(const std::string& name, const ExperimentConfig& cfg) {
    cfg.validate();
    ensure_out_dir(cfg);
    if (name == "train-teacher") return cmd_train_teacher(cfg);
    if (name == "distill-step") return cmd_distill_step(cfg);
    if (name == "distill-layer") return cmd_distill_layer(cfg);
    if (name == "distill-ls") return cmd_distill_ls(cfg);
    if (name == "sample") return cmd_sample(cfg);
    if (name == "eval") return cmd_eval(cfg);
    if (name == "bench") return cmd_bench(cfg);
    if (name == "probe-variance") return cmd_probe_variance(cfg);
    if (name == "sweep-rho") return cmd_sweep_rho(cfg);
    if (name == "ablate-noise-routing") return cmd_ablate_noise_routing(cfg);
    if (name == "ablate-layer") return cmd_ablate_layer(cfg);
    throw ConfigError("unknown command '" + name + "'");
}

// ---- resumable step-distillation state ---------------------------------------

namespace {

void add_model_sections(CheckpointData& data, const std::string& prefix, const DitModel& model) {
    const auto& names = model.param_names();
    auto params = model.params();
    for (size_t i = 0; i < names.size(); ++i) data.add(prefix + names[i], params[i].value());
}

void add_adam_sections(CheckpointData& data, const std::string& prefix, AdamState& opt) {
    data.add_scalar(prefix + "step_count", static_cast<double>(opt.step_count()));
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (size_t i = 0; i < m.size(); ++i) {
        data.add(prefix + "m." + std::to_string(i), m[i]);
        data.add(prefix + "v." + std::to_string(i), v[i]);
    }
}

void load_adam_sections(const CheckpointData& data, const std::string& prefix, AdamState& opt,
                        std::span<const Var> params) {
    int64_t steps = static_cast<int64_t>(data.scalar(prefix + "step_count"));
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    m.clear();
    v.clear();
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor* mt = data.find(prefix + "m." + std::to_string(i));
        const Tensor* vt = data.find(prefix + "v." + std::to_string(i));
        if (steps > 0 && (!mt || !vt)) throw IoError("checkpoint: missing optimizer moment " + std::to_string(i));
        m.push_back(mt ? *mt : Tensor::zeros(params[i].value().shape()));
        v.push_back(vt ? *vt : Tensor::zeros(params[i].value().shape()));
    }
    opt.set_step_count(steps);
}

}  // namespace

void save_step_state(const std::string& path, const StepDistillState& state, uint64_t config_hash_value) {
    CheckpointData data;
    data.stage = "step-state";
    data.config_hash = config_hash_value;
    data.step_count = state.iterations_done();
    data.add_scalar("counters.iterations", static_cast<double>(state.iterations_done()));
    data.add_scalar("counters.generator_updates", static_cast<double>(state.generator_updates()));
    data.add_scalar("counters.fake_updates", static_cast<double>(state.fake_updates()));
    auto& mutable_state = const_cast<StepDistillState&>(state);
    add_model_sections(data, "generator.", *mutable_state.generator().model());
    add_model_sections(data, "fake.", *mutable_state.fake_denoiser().model());
    const auto& head = mutable_state.head();
    for (size_t i = 0; i < head.param_names().size(); ++i) {
        data.add("head." + head.param_names()[i], head.params()[i].value());
    }
    add_adam_sections(data, "g1.", mutable_state.generator_optimizer());
    add_adam_sections(data, "g2.", mutable_state.fake_optimizer());
    save_checkpoint(path, data);
}

void load_step_state(const std::string& path, StepDistillState& state, uint64_t config_hash_value, bool force) {
    CheckpointData data = load_checkpoint(path);
    if (data.stage != "step-state") throw IoError("checkpoint: '" + path + "' is not a distillation state");
    if (data.config_hash != config_hash_value && !force) {
        throw IoError("checkpoint: config hash mismatch on resume (use force to override)");
    }
    auto restore_model = [&](const std::string& prefix, DitModel& model) {
        const auto& names = model.param_names();
        auto params = model.params_mut();
        for (size_t i = 0; i < names.size(); ++i) {
            const Tensor* t = data.find(prefix + names[i]);
            if (!t) throw IoError("checkpoint: missing section '" + prefix + names[i] + "'");
            params[i].value_mut() = *t;
        }
    };
    restore_model("generator.", *state.generator().model());
    restore_model("fake.", *state.fake_denoiser().model());
    auto& head = state.head();
    for (size_t i = 0; i < head.param_names().size(); ++i) {
        const Tensor* t = data.find("head." + head.param_names()[i]);
        if (!t) throw IoError("checkpoint: missing section 'head." + head.param_names()[i] + "'");
        const_cast<Var&>(head.params()[i]).value_mut() = *t;
    }
    std::vector<Var> gen_params(state.generator().model()->params().begin(),
                                state.generator().model()->params().end());
    load_adam_sections(data, "g1.", state.generator_optimizer(), gen_params);
    std::vector<Var> fake_params(state.fake_denoiser().model()->params().begin(),
                                 state.fake_denoiser().model()->params().end());
    for (const Var& p : head.params()) fake_params.push_back(p);
    load_adam_sections(data, "g2.", state.fake_optimizer(), fake_params);
    state.set_counters(static_cast<int64_t>(data.scalar("counters.iterations")),
                       static_cast<int64_t>(data.scalar("counters.generator_updates")),
                       static_cast<int64_t>(data.scalar("counters.fake_updates")));
}

}  // namespace edmd
