#include "edmd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "edmd/errors.hpp"
#include "json.hpp"

namespace edmd {

using nlohmann::json;

namespace {

struct Violations {
    std::vector<std::string> items;
    void add(const std::string& path, const std::string& msg) { items.push_back(path + ": " + msg); }
    void raise_if_any() const {
        if (items.empty()) return;
        std::ostringstream os;
        os << "invalid config (" << items.size() << " violation" << (items.size() > 1 ? "s" : "") << "):";
        for (const auto& it : items) os << "\n  - " << it;
        throw ConfigError(os.str());
    }
};

class SectionReader {
  public:
    SectionReader(const json* obj, std::string path, Violations* v) : obj_(obj), path_(std::move(path)), v_(v) {}

    bool has(const std::string& key) const { return obj_ && obj_->contains(key); }

    template <typename T>
    void get(const std::string& key, T& out) {
        known_.insert(key);
        if (!has(key)) return;
        try {
            out = obj_->at(key).get<T>();
        } catch (const json::exception&) {
            v_->add(path_ + key, "wrong type (have " + std::string(obj_->at(key).type_name()) + ")");
        }
    }

    void get_enum(const std::string& key, std::string& out) { get<std::string>(key, out); }

    SectionReader section(const std::string& key) {
        known_.insert(key);
        const json* child = nullptr;
        if (has(key)) {
            if (obj_->at(key).is_object()) {
                child = &obj_->at(key);
            } else {
                v_->add(path_ + key, "expected an object");
            }
        }
        return SectionReader(child, path_ + key + ".", v_);
    }

    void finish() {
        if (!obj_) return;
        for (auto it = obj_->begin(); it != obj_->end(); ++it) {
            if (!known_.count(it.key())) v_->add(path_ + it.key(), "unknown key");
        }
    }

  private:
    const json* obj_;
    std::string path_;
    Violations* v_;
    std::set<std::string> known_;
};

template <typename F>
void check(Violations& v, const std::string& path, F&& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        v.add(path, e.what());
    } catch (const DomainError& e) {
        v.add(path, e.what());
    }
}

}  // namespace

void EvalConfig::validate() const {
    if (samples < 4) throw ConfigError("eval.samples must be >= 4");
    if (knn_k < 1 || knn_k >= samples) throw ConfigError("eval.knn_k must satisfy 1 <= k < samples");
    if (nominal_duration_s <= 0) throw ConfigError("eval.nominal_duration_s must be > 0");
    if (bench_warmups < 0 || bench_repeats < 1) throw ConfigError("eval.bench settings out of range");
    for (int64_t s : bench_steps) {
        if (s < 1) throw ConfigError("eval.bench_steps entries must be >= 1");
    }
    for (double r : rejection_ratios) {
        if (r < 0 || r >= 1) throw ConfigError("eval.rejection_ratios entries must lie in [0, 1)");
    }
    for (double s : probe_sigmas) {
        if (s <= 0) throw ConfigError("eval.probe_sigmas entries must be > 0");
    }
    for (double r : rho_values) {
        if (r < 1) throw ConfigError("eval.rho_values entries must be >= 1");
    }
}

void ExperimentConfig::validate() const {
    Violations v;
    check(v, "dataset", [&] { dataset.validate(); });
    check(v, "edm", [&] { edm.validate(); });
    check(v, "model", [&] { model.validate(); });
    check(v, "step_distill", [&] { step.validate(model.tokens); });
    check(v, "layer_distill", [&] { layer.validate(); });
    check(v, "sampler", [&] { sampler.validate(); });
    check(v, "eval", [&] { eval.validate(); });
    check(v, "ls", [&] { ls_pipeline_config().validate(); });
    check(v, "teacher", [&] {
        if (teacher.steps < 1 || teacher.batch < 1) throw ConfigError("steps and batch must be >= 1");
        if (teacher.cond_dropout < 0 || teacher.cond_dropout > 1) {
            throw ConfigError("cond_dropout must lie in [0, 1]");
        }
    });
    check(v, "model", [&] {
        if (model.tokens != dataset.dim()) {
            throw ConfigError("model.tokens " + std::to_string(model.tokens) + " must equal the dataset dimension " +
                              std::to_string(dataset.dim()));
        }
        if (model.categories != dataset.categories || model.tempo_buckets != dataset.tempo_buckets) {
            throw ConfigError("model condition vocabularies must match the dataset");
        }
        if (layer.schedule.budgets.size() == 5) {
            for (int64_t b : layer.schedule.scaled_budgets(model.depth)) {
                if (b >= model.depth) throw ConfigError("scaled drop budget exceeds model depth");
            }
        }
    });
    check(v, "out_dir", [&] {
        if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    });
    v.raise_if_any();
}

LsPipelineConfig ExperimentConfig::ls_pipeline_config() const {
    LsPipelineConfig cfg;
    cfg.layer = layer;
    cfg.layer.schedule.budgets = ls_reduced_budgets;
    cfg.step = step;
    cfg.order = ls_order;
    cfg.score_init = ls_score_init;
    cfg.allow_failure_modes = ls_allow_failure_modes;
    return cfg;
}

namespace {

ExperimentConfig read_config(const json& doc) {
    Violations v;
    ExperimentConfig cfg;
    SectionReader root(&doc, "", &v);

    root.get("seed", cfg.seed);
    root.get("out_dir", cfg.out_dir);
    root.get("checkpoint_path", cfg.checkpoint_path);

    {
        auto s = root.section("dataset");
        std::string kind = cfg.dataset.kind == DatasetSpec::Kind::Gmm2D ? "gmm2d" : "toysignal1d";
        s.get_enum("kind", kind);
        if (kind == "gmm2d") {
            cfg.dataset.kind = DatasetSpec::Kind::Gmm2D;
        } else if (kind == "toysignal1d") {
            cfg.dataset.kind = DatasetSpec::Kind::ToySignal1D;
        } else {
            v.add("dataset.kind", "unknown dataset kind '" + kind + "'");
        }
        s.get("samples", cfg.dataset.sample_count);
        s.get("categories", cfg.dataset.categories);
        s.get("tempo_buckets", cfg.dataset.tempo_buckets);
        s.get("component_radius", cfg.dataset.component_radius);
        s.get("component_var", cfg.dataset.component_var);
        s.get("sequence_length", cfg.dataset.sequence_length);
        s.finish();
    }
    {
        auto s = root.section("edm");
        s.get("sigma_data", cfg.edm.sigma_data);
        s.get("p_mean", cfg.edm.p_mean);
        s.get("p_std", cfg.edm.p_std);
        s.get("sigma_min", cfg.edm.sigma_min);
        s.get("sigma_max", cfg.edm.sigma_max);
        s.finish();
    }
    {
        auto s = root.section("model");
        s.get("depth", cfg.model.depth);
        s.get("width", cfg.model.width);
        s.get("heads", cfg.model.heads);
        s.get("mlp_mult", cfg.model.mlp_mult);
        s.finish();
    }
    // Condition vocabularies and the token count follow the dataset.
    cfg.model.tokens = cfg.dataset.dim();
    cfg.model.categories = cfg.dataset.categories;
    cfg.model.tempo_buckets = cfg.dataset.tempo_buckets;
    {
        auto s = root.section("teacher");
        s.get("steps", cfg.teacher.steps);
        s.get("batch", cfg.teacher.batch);
        s.get("lr", cfg.teacher.lr);
        s.get("cond_dropout", cfg.teacher.cond_dropout);
        s.finish();
    }
    {
        auto s = root.section("step_distill");
        s.get("iterations", cfg.step.iterations);
        s.get("batch", cfg.step.batch);
        s.get("lr_generator", cfg.step.lr_generator);
        s.get("lr_fake", cfg.step.lr_fake);
        s.get("update_ratio", cfg.step.update_ratio);
        s.get("teacher_guidance", cfg.step.teacher_guidance);
        s.get("dmd_weight", cfg.step.dmd_weight);
        s.get("nu1", cfg.step.nu1);
        s.get("nu2", cfg.step.nu2);
        s.get("gen_rho", cfg.step.gen_rho);
        s.get("disc_stages", cfg.step.disc_stages);
        std::string gan = to_string(cfg.step.gan_kind);
        s.get_enum("gan_kind", gan);
        check(v, "step_distill.gan_kind", [&] { cfg.step.gan_kind = gan_kind_from_string(gan); });
        std::string mode = cfg.step.input_mode == StepDistillConfig::InputMode::Continuous ? "continuous" : "discrete";
        s.get_enum("input_mode", mode);
        if (mode == "continuous") {
            cfg.step.input_mode = StepDistillConfig::InputMode::Continuous;
        } else if (mode == "discrete") {
            cfg.step.input_mode = StepDistillConfig::InputMode::Discrete;
        } else {
            v.add("step_distill.input_mode", "unknown mode '" + mode + "'");
        }
        s.get("discrete_sigmas", cfg.step.discrete_sigmas);
        {
            auto r = s.section("routing");
            auto read_source = [&](const char* key, NoiseSource& out) {
                std::string name = to_string(out);
                r.get_enum(key, name);
                check(v, std::string("step_distill.routing.") + key, [&] { out = noise_source_from_string(name); });
            };
            read_source("gen", cfg.step.routing.gen);
            read_source("dmd", cfg.step.routing.dmd);
            read_source("dsm", cfg.step.routing.dsm);
            read_source("gan", cfg.step.routing.gan);
            r.finish();
        }
        {
            auto g = s.section("collapse_guard");
            g.get("enabled", cfg.step.collapse_guard.enabled);
            g.get("real_accuracy_threshold", cfg.step.collapse_guard.real_accuracy_threshold);
            g.get("window", cfg.step.collapse_guard.window);
            g.finish();
        }
        s.finish();
    }
    {
        auto s = root.section("layer_distill");
        s.get("steps", cfg.layer.steps);
        s.get("batch", cfg.layer.batch);
        s.get("lr", cfg.layer.lr);
        s.get("self_teacher_weight", cfg.layer.self_teacher_weight);
        s.get("budget_conditioning", cfg.layer.budget_conditioning);
        {
            auto d = s.section("schedule");
            d.get("budgets", cfg.layer.schedule.budgets);
            d.get("reference_depth", cfg.layer.schedule.reference_depth);
            d.get("rho", cfg.layer.schedule.rho);
            std::string variant = to_string(cfg.layer.schedule.variant);
            d.get_enum("variant", variant);
            check(v, "layer_distill.schedule.variant",
                  [&] { cfg.layer.schedule.variant = drop_variant_from_string(variant); });
            d.finish();
        }
        s.finish();
    }
    {
        auto s = root.section("ls");
        s.get("reduced_budgets", cfg.ls_reduced_budgets);
        std::string order = to_string(cfg.ls_order);
        s.get_enum("order", order);
        check(v, "ls.order", [&] { cfg.ls_order = ls_order_from_string(order); });
        std::string init = to_string(cfg.ls_score_init);
        s.get_enum("score_init", init);
        check(v, "ls.score_init", [&] { cfg.ls_score_init = score_init_from_string(init); });
        s.get("allow_failure_modes", cfg.ls_allow_failure_modes);
        s.finish();
    }
    {
        auto s = root.section("sampler");
        std::string kind = to_string(cfg.sampler.kind);
        s.get_enum("kind", kind);
        check(v, "sampler.kind", [&] { cfg.sampler.kind = sampler_kind_from_string(kind); });
        s.get("steps", cfg.sampler.steps);
        s.get("rho", cfg.sampler.rho);
        std::string mode = cfg.sampler.guidance.mode == GuidanceMode::Cfg ? "cfg" : "cfg++";
        s.get_enum("guidance_mode", mode);
        if (mode == "cfg") {
            cfg.sampler.guidance.mode = GuidanceMode::Cfg;
        } else if (mode == "cfg++" || mode == "cfgpp") {
            cfg.sampler.guidance.mode = GuidanceMode::CfgPlusPlus;
        } else {
            v.add("sampler.guidance_mode", "unknown mode '" + mode + "'");
        }
        s.get("guidance_weight", cfg.sampler.guidance.weight);
        s.finish();
    }
    {
        auto s = root.section("eval");
        s.get("samples", cfg.eval.samples);
        s.get("knn_k", cfg.eval.knn_k);
        s.get("nominal_duration_s", cfg.eval.nominal_duration_s);
        s.get("bench_warmups", cfg.eval.bench_warmups);
        s.get("bench_repeats", cfg.eval.bench_repeats);
        s.get("bench_steps", cfg.eval.bench_steps);
        s.get("rejection_ratios", cfg.eval.rejection_ratios);
        s.get("probe_sigmas", cfg.eval.probe_sigmas);
        s.get("rho_values", cfg.eval.rho_values);
        s.finish();
    }
    root.finish();
    v.raise_if_any();
    cfg.sampler.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
    return read_config(doc);
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    json doc;
    doc["seed"] = cfg.seed;
    doc["out_dir"] = cfg.out_dir;
    doc["checkpoint_path"] = cfg.checkpoint_path;
    doc["dataset"] = {
        {"kind", cfg.dataset.kind == DatasetSpec::Kind::Gmm2D ? "gmm2d" : "toysignal1d"},
        {"samples", cfg.dataset.sample_count},
        {"categories", cfg.dataset.categories},
        {"tempo_buckets", cfg.dataset.tempo_buckets},
        {"component_radius", cfg.dataset.component_radius},
        {"component_var", cfg.dataset.component_var},
        {"sequence_length", cfg.dataset.sequence_length},
    };
    doc["edm"] = {
        {"sigma_data", cfg.edm.sigma_data}, {"p_mean", cfg.edm.p_mean},       {"p_std", cfg.edm.p_std},
        {"sigma_min", cfg.edm.sigma_min},   {"sigma_max", cfg.edm.sigma_max},
    };
    doc["model"] = {
        {"depth", cfg.model.depth},
        {"width", cfg.model.width},
        {"heads", cfg.model.heads},
        {"mlp_mult", cfg.model.mlp_mult},
    };
    doc["teacher"] = {
        {"steps", cfg.teacher.steps},
        {"batch", cfg.teacher.batch},
        {"lr", cfg.teacher.lr},
        {"cond_dropout", cfg.teacher.cond_dropout},
    };
    doc["step_distill"] = {
        {"iterations", cfg.step.iterations},
        {"batch", cfg.step.batch},
        {"lr_generator", cfg.step.lr_generator},
        {"lr_fake", cfg.step.lr_fake},
        {"update_ratio", cfg.step.update_ratio},
        {"teacher_guidance", cfg.step.teacher_guidance},
        {"dmd_weight", cfg.step.dmd_weight},
        {"nu1", cfg.step.nu1},
        {"nu2", cfg.step.nu2},
        {"gen_rho", cfg.step.gen_rho},
        {"disc_stages", cfg.step.disc_stages},
        {"gan_kind", to_string(cfg.step.gan_kind)},
        {"input_mode", cfg.step.input_mode == StepDistillConfig::InputMode::Continuous ? "continuous" : "discrete"},
        {"discrete_sigmas", cfg.step.discrete_sigmas},
        {"routing",
         {{"gen", to_string(cfg.step.routing.gen)},
          {"dmd", to_string(cfg.step.routing.dmd)},
          {"dsm", to_string(cfg.step.routing.dsm)},
          {"gan", to_string(cfg.step.routing.gan)}}},
        {"collapse_guard",
         {{"enabled", cfg.step.collapse_guard.enabled},
          {"real_accuracy_threshold", cfg.step.collapse_guard.real_accuracy_threshold},
          {"window", cfg.step.collapse_guard.window}}},
    };
    doc["layer_distill"] = {
        {"steps", cfg.layer.steps},
        {"batch", cfg.layer.batch},
        {"lr", cfg.layer.lr},
        {"self_teacher_weight", cfg.layer.self_teacher_weight},
        {"budget_conditioning", cfg.layer.budget_conditioning},
        {"schedule",
         {{"budgets", cfg.layer.schedule.budgets},
          {"reference_depth", cfg.layer.schedule.reference_depth},
          {"rho", cfg.layer.schedule.rho},
          {"variant", to_string(cfg.layer.schedule.variant)}}},
    };
    doc["ls"] = {
        {"reduced_budgets", cfg.ls_reduced_budgets},
        {"order", to_string(cfg.ls_order)},
        {"score_init", to_string(cfg.ls_score_init)},
        {"allow_failure_modes", cfg.ls_allow_failure_modes},
    };
    doc["sampler"] = {
        {"kind", to_string(cfg.sampler.kind)},
        {"steps", cfg.sampler.steps},
        {"rho", cfg.sampler.rho},
        {"guidance_mode", cfg.sampler.guidance.mode == GuidanceMode::Cfg ? "cfg" : "cfg++"},
        {"guidance_weight", cfg.sampler.guidance.weight},
    };
    doc["eval"] = {
        {"samples", cfg.eval.samples},
        {"knn_k", cfg.eval.knn_k},
        {"nominal_duration_s", cfg.eval.nominal_duration_s},
        {"bench_warmups", cfg.eval.bench_warmups},
        {"bench_repeats", cfg.eval.bench_repeats},
        {"bench_steps", cfg.eval.bench_steps},
        {"rejection_ratios", cfg.eval.rejection_ratios},
        {"probe_sigmas", cfg.eval.probe_sigmas},
        {"rho_values", cfg.eval.rho_values},
    };
    return doc.dump(2);
}

uint64_t config_hash(const ExperimentConfig& cfg) {
    std::string text = serialize_config(cfg);
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string apply_override(const std::string& json_text, const std::string& dotted_key, const std::string& value) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    json parsed_value;
    try {
        parsed_value = json::parse(value);
    } catch (const json::exception&) {
        parsed_value = value;  // plain string
    }
    json* node = &doc;
    size_t start = 0;
    while (true) {
        size_t dot = dotted_key.find('.', start);
        std::string key = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override key '" + dotted_key + "' is malformed");
        if (dot == std::string::npos) {
            (*node)[key] = parsed_value;
            break;
        }
        node = &(*node)[key];
        if (!node->is_object() && !node->is_null()) {
            throw ConfigError("override key '" + dotted_key + "' crosses a non-object value");
        }
        start = dot + 1;
    }
    return doc.dump();
}

}  // namespace edmd
