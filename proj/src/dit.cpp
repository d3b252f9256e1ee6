#include "edmd/dit.hpp"

#include <algorithm>
#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

void DitConfig::validate() const {
    if (depth < 2) throw ConfigError("model.depth must be >= 2");
    if (width < 2 || width % 2 != 0) throw ConfigError("model.width must be even and >= 2");
    if (heads < 1 || width % heads != 0) throw ConfigError("model.width must be divisible by model.heads");
    if (tokens < 1) throw ConfigError("model.tokens must be >= 1");
    if (categories < 1) throw ConfigError("model.categories must be >= 1");
    if (tempo_buckets < 1) throw ConfigError("model.tempo_buckets must be >= 1");
    if (mlp_mult < 1) throw ConfigError("model.mlp_mult must be >= 1");
}

struct DitModel::Layout {
    size_t in_w, in_b, pos;
    size_t noise_w1, noise_b1, noise_w2, noise_b2;
    size_t tempo_table, cat_table;
    struct Block {
        size_t mod_w, mod_b;
        size_t qkv_w, qkv_b, proj_w, proj_b;
        size_t mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };
    std::vector<Block> blocks;
    size_t out_w, out_b;
    size_t bud_in_w = SIZE_MAX, bud_in_b = SIZE_MAX, bud_out_w = SIZE_MAX, bud_out_b = SIZE_MAX;
};

DitModel::DitModel(const DitConfig& config, uint64_t init_seed) : config_(config) {
    config_.validate();
    build_params(init_seed);
}

void DitModel::build_params(uint64_t init_seed) {
    SeededStream rng(init_seed);
    auto layout = std::make_shared<Layout>();
    params_.clear();
    names_.clear();

    auto add_param = [&](const std::string& name, Tensor value) {
        params_.push_back(Var::leaf(std::move(value), true, name));
        names_.push_back(name);
        return params_.size() - 1;
    };
    auto gaussian_init = [&](Shape shape, double std_dev) {
        Tensor t = rng.gaussian(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) t[i] *= std_dev;
        return t;
    };

    const int64_t w = config_.width;
    const int64_t t = config_.tokens;
    const int64_t mw = config_.width * config_.mlp_mult;
    const double ws = 1.0 / std::sqrt(static_cast<double>(w));

    layout->in_w = add_param("in.w", gaussian_init({1, w}, 1.0));
    layout->in_b = add_param("in.b", Tensor::zeros({w}));
    layout->pos = add_param("pos", gaussian_init({t, w}, 0.02));
    layout->noise_w1 = add_param("noise.w1", gaussian_init({w, w}, ws));
    layout->noise_b1 = add_param("noise.b1", Tensor::zeros({w}));
    layout->noise_w2 = add_param("noise.w2", gaussian_init({w, w}, ws));
    layout->noise_b2 = add_param("noise.b2", Tensor::zeros({w}));
    layout->tempo_table = add_param("tempo.table", gaussian_init({config_.tempo_buckets, w}, 0.02));
    layout->cat_table = add_param("cat.table", gaussian_init({config_.categories + 1, w}, 0.02));

    char buf[64];
    for (int64_t li = 0; li < config_.depth; ++li) {
        Layout::Block blk;
        auto bname = [&](const char* suffix) {
            std::snprintf(buf, sizeof(buf), "block%02d.%s", static_cast<int>(li), suffix);
            return std::string(buf);
        };
        // Adaptive-norm modulation starts at zero so every block begins as
        // the identity map.
        blk.mod_w = add_param(bname("mod.w"), Tensor::zeros({w, 6 * w}));
        blk.mod_b = add_param(bname("mod.b"), Tensor::zeros({6 * w}));
        blk.qkv_w = add_param(bname("attn.qkv.w"), gaussian_init({w, 3 * w}, ws));
        blk.qkv_b = add_param(bname("attn.qkv.b"), Tensor::zeros({3 * w}));
        blk.proj_w = add_param(bname("attn.proj.w"), gaussian_init({w, w}, ws));
        blk.proj_b = add_param(bname("attn.proj.b"), Tensor::zeros({w}));
        blk.mlp_w1 = add_param(bname("mlp.w1"), gaussian_init({w, mw}, ws));
        blk.mlp_b1 = add_param(bname("mlp.b1"), Tensor::zeros({mw}));
        blk.mlp_w2 = add_param(bname("mlp.w2"), gaussian_init({mw, w}, 1.0 / std::sqrt(static_cast<double>(mw))));
        blk.mlp_b2 = add_param(bname("mlp.b2"), Tensor::zeros({w}));
        layout->blocks.push_back(blk);
    }
    layout->out_w = add_param("out.w", Tensor::zeros({w, 1}));
    layout->out_b = add_param("out.b", Tensor::zeros({1}));
    if (config_.budget_path) {
        layout->bud_in_w = add_param("budget.in.w", Tensor::zeros({w, w}));
        layout->bud_in_b = add_param("budget.in.b", Tensor::zeros({w}));
        layout->bud_out_w = add_param("budget.out.w", Tensor::zeros({w, 2 * w}));
        layout->bud_out_b = add_param("budget.out.b", Tensor::zeros({2 * w}));
    }
    layout_ = std::move(layout);
}

std::vector<int> DitModel::all_layers() const {
    std::vector<int> out(static_cast<size_t>(config_.depth));
    for (int i = 0; i < config_.depth; ++i) out[static_cast<size_t>(i)] = i + 1;
    return out;
}

Var DitModel::param(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return params_[i];
    }
    throw Error("unknown parameter '" + name + "'");
}

int64_t DitModel::param_count() const {
    int64_t n = 0;
    for (const Var& p : params_) n += p.value().size();
    return n;
}

DitModel DitModel::clone() const {
    DitModel out;
    out.config_ = config_;
    out.layout_ = layout_;
    out.names_ = names_;
    out.params_.reserve(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        out.params_.push_back(Var::leaf(params_[i].value(), true, names_[i]));
    }
    return out;
}

DitModel DitModel::with_budget_path() const {
    DitConfig cfg = config_;
    cfg.budget_path = true;
    DitModel out(cfg, 0);
    out.copy_common_params_from(*this);
    return out;
}

void DitModel::copy_common_params_from(const DitModel& other) {
    for (size_t i = 0; i < names_.size(); ++i) {
        for (size_t j = 0; j < other.names_.size(); ++j) {
            if (names_[i] == other.names_[j]) {
                if (!same_shape(params_[i].value().shape(), other.params_[j].value().shape())) {
                    throw ShapeError("parameter '" + names_[i] + "' shape mismatch between models");
                }
                params_[i].value_mut() = other.params_[j].value();
            }
        }
    }
}

bool DitModel::params_bitwise_equal(const DitModel& other) const {
    if (names_ != other.names_) return false;
    for (size_t i = 0; i < params_.size(); ++i) {
        if (!bitwise_equal(params_[i].value(), other.params_[i].value())) return false;
    }
    return true;
}

DitModel::ForwardResult DitModel::forward(const Var& x_tokens, const Tensor& c_noise,
                                          std::span<const Condition> cond, const std::optional<Tensor>& budget,
                                          std::span<const int> executed_layers) const {
    const Layout& lay = *layout_;
    const int64_t w = config_.width;
    const int64_t t = config_.tokens;
    const int64_t heads = config_.heads;
    const int64_t hd = w / heads;

    const Shape& xs = x_tokens.value().shape();
    if (xs.size() != 2 || xs[1] != t) {
        throw ShapeError("dit forward: expected (B, " + std::to_string(t) + ") tokens, got " + shape_str(xs));
    }
    const int64_t b = xs[0];
    if (c_noise.rank() != 1 || c_noise.dim(0) != b) {
        throw ShapeError("dit forward: c_noise shape " + shape_str(c_noise.shape()) + " does not match batch");
    }
    if (static_cast<int64_t>(cond.size()) != b) {
        throw ShapeError("dit forward: need one condition per row");
    }
    if (config_.budget_path) {
        if (!budget) throw Error("dit forward: model has a budget path but no budget was supplied");
        if (budget->rank() != 1 || budget->dim(0) != b) {
            throw ShapeError("dit forward: budget shape " + shape_str(budget->shape()) + " does not match batch");
        }
    } else if (budget) {
        throw Error("dit forward: budget supplied to a model without a budget path");
    }
    if (executed_layers.empty()) throw Error("dit forward: executed layer set is empty");
    int prev = 0;
    for (int li : executed_layers) {
        if (li <= prev || li < 1 || li > config_.depth) {
            throw Error("dit forward: executed layers must be ascending within 1.." + std::to_string(config_.depth));
        }
        prev = li;
    }

    // Token embedding plus learned positions.
    Var h = add(add(matmul(reshape(x_tokens, {b, t, 1}), p(lay.in_w)), p(lay.in_b)), p(lay.pos));

    // Conditioning: noise MLP + tempo & category tables (+ budget embedding).
    Var nemb = Var::constant(sinusoidal_embedding(c_noise, w));
    nemb = add(matmul(silu(add(matmul(nemb, p(lay.noise_w1)), p(lay.noise_b1))), p(lay.noise_w2)), p(lay.noise_b2));
    std::vector<int> tempo_ids(cond.size());
    std::vector<int> cat_ids(cond.size());
    for (size_t i = 0; i < cond.size(); ++i) {
        int tempo = cond[i].tempo;
        if (tempo < 0 || tempo >= config_.tempo_buckets) {
            throw Error("dit forward: tempo bucket " + std::to_string(tempo) + " out of range");
        }
        tempo_ids[i] = tempo;
        int cat = cond[i].category;
        if (cat == kNullCategory) {
            cat_ids[i] = static_cast<int>(config_.categories);  // null row
        } else if (cat >= 0 && cat < config_.categories) {
            cat_ids[i] = cat;
        } else {
            throw Error("dit forward: category " + std::to_string(cat) + " out of range");
        }
    }
    Var cond_sum = add(add(nemb, gather_rows(p(lay.tempo_table), tempo_ids)), gather_rows(p(lay.cat_table), cat_ids));
    Var bud_sin;
    if (config_.budget_path) {
        bud_sin = Var::constant(sinusoidal_embedding(*budget, w));
        cond_sum = add(cond_sum, add(matmul(bud_sin, p(lay.bud_in_w)), p(lay.bud_in_b)));
    }
    Var cond_act = silu(cond_sum);

    ForwardResult res;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int li : executed_layers) {
        const Layout::Block& blk = lay.blocks[static_cast<size_t>(li - 1)];
        Var mod = add(matmul(cond_act, p(blk.mod_w)), p(blk.mod_b));
        auto mod_slice = [&](int64_t idx) { return reshape(slice_last(mod, idx * w, w), {b, 1, w}); };
        Var s1 = mod_slice(0), t1 = mod_slice(1), g1 = mod_slice(2);
        Var s2 = mod_slice(3), t2 = mod_slice(4), g2 = mod_slice(5);

        Var attn_in = add(mul(layer_norm(h), shift(s1, 1.0)), t1);
        Var qkv = add(matmul(attn_in, p(blk.qkv_w)), p(blk.qkv_b));
        auto head_split = [&](int64_t offset) {
            return permute(reshape(slice_last(qkv, offset, w), {b, t, heads, hd}), {0, 2, 1, 3});
        };
        Var q = head_split(0), k = head_split(w), v = head_split(2 * w);
        Var attn_w = softmax(scale(bmm(q, transpose_last2(k)), attn_scale));
        Var o = reshape(permute(bmm(attn_w, v), {0, 2, 1, 3}), {b, t, w});
        Var attn_out = add(matmul(o, p(blk.proj_w)), p(blk.proj_b));
        h = add(h, mul(g1, attn_out));

        Var mlp_in = add(mul(layer_norm(h), shift(s2, 1.0)), t2);
        Var mlp_out =
            add(matmul(silu(add(matmul(mlp_in, p(blk.mlp_w1)), p(blk.mlp_b1))), p(blk.mlp_w2)), p(blk.mlp_b2));
        h = add(h, mul(g2, mlp_out));
        res.hidden.push_back(h);
    }

    res.final_norm = layer_norm(h);
    Var de_embed_in = res.final_norm;
    if (config_.budget_path) {
        Var bud_mod = add(matmul(bud_sin, p(lay.bud_out_w)), p(lay.bud_out_b));
        Var sb = reshape(slice_last(bud_mod, 0, w), {b, 1, w});
        Var tb = reshape(slice_last(bud_mod, w, w), {b, 1, w});
        de_embed_in = add(mul(res.final_norm, shift(sb, 1.0)), tb);
    }
    res.output = reshape(add(matmul(de_embed_in, p(lay.out_w)), p(lay.out_b)), {b, t});
    return res;
}

// ---- DitDenoiser -------------------------------------------------------------

DitDenoiser::DitDenoiser(std::shared_ptr<DitModel> model, EdmConfig edm)
    : model_(std::move(model)), edm_(edm) {
    edm_.validate();
}

DitDenoiser::Drop DitDenoiser::drop_for(double sigma) const {
    if (policy_) return policy_(sigma);
    Drop d;
    d.executed = model_->all_layers();
    d.budget = 0;
    return d;
}

Tensor DitDenoiser::denoise(const Tensor& x, double sigma, std::span<const Condition> cond) const {
    NoGradGuard guard;
    Drop drop = drop_for(sigma);
    Var xv = Var::constant(x);
    return denoise_var_dropped(xv, sigma, cond, drop.executed, drop.budget).denoised.value();
}

Var DitDenoiser::denoise_var(const Var& x, const Tensor& sigma, std::span<const Condition> cond) const {
    std::vector<int> executed = model_->all_layers();
    std::vector<Condition> cond_copy(cond.begin(), cond.end());
    auto net = [this, executed = std::move(executed), cond_copy](const Var& x_in, const Tensor& c_noise) {
        std::optional<Tensor> budget;
        if (model_->config().budget_path) budget = Tensor::zeros({c_noise.dim(0)});
        return model_->forward(x_in, c_noise, cond_copy, budget, executed).output;
    };
    return edmd::denoise(net, x, sigma, edm_);
}

DitDenoiser::VarResult DitDenoiser::denoise_var_dropped(const Var& x, double sigma, std::span<const Condition> cond,
                                                        std::span<const int> executed_layers, int budget) const {
    PreconditionCoeffs c = precondition(sigma, edm_);
    const int64_t b = x.value().dim(0);
    Tensor c_noise = Tensor::full({b}, c.c_noise);
    std::optional<Tensor> budget_t;
    if (model_->config().budget_path) {
        budget_t = Tensor::full({b}, static_cast<double>(budget));
    } else if (budget != 0) {
        throw Error("denoiser: nonzero budget for a model without a budget path");
    }
    Var x_in = scale(x, c.c_in);
    auto fwd = model_->forward(x_in, c_noise, cond, budget_t, executed_layers);
    VarResult res;
    res.denoised = add(scale(x, c.c_skip), scale(fwd.output, c.c_out));
    res.final_norm = fwd.final_norm;
    res.hidden = std::move(fwd.hidden);
    return res;
}

// ---- activation probe ----------------------------------------------------------

double ActivationProfile::last_to_median_ratio(size_t sigma_idx) const {
    std::vector<double> v = variance.at(sigma_idx);
    if (v.empty()) return 0.0;
    double last = v.back();
    std::nth_element(v.begin(), v.begin() + static_cast<int64_t>(v.size() / 2), v.end());
    double med = v[v.size() / 2];
    return med > 0 ? last / med : 0.0;
}

ActivationProfile variance_profile(const DitDenoiser& denoiser, const Tensor& clean_batch,
                                   std::span<const Condition> cond, std::span<const double> sigma_levels,
                                   SeededStream& stream) {
    if (sigma_levels.empty()) throw Error("variance_profile: sigma level list is empty");
    NoGradGuard guard;
    ActivationProfile profile;
    const int64_t b = clean_batch.dim(0);
    const int64_t d = clean_batch.dim(1);
    for (double sigma : sigma_levels) {
        Tensor noisy(clean_batch.shape());
        for (int64_t i = 0; i < noisy.size(); ++i) noisy[i] = clean_batch[i] + sigma * stream.gaussian();
        auto res = denoiser.denoise_var_dropped(Var::constant(noisy), sigma, cond,
                                                denoiser.model()->all_layers(), 0);
        std::vector<double> per_layer;
        per_layer.reserve(res.hidden.size());
        for (const Var& hvar : res.hidden) {
            // Variance across the batch at each (token, channel) position,
            // averaged over positions; a constant batch probes as zero.
            const Tensor& h = hvar.value();
            int64_t positions = h.size() / b;
            double acc = 0.0;
            for (int64_t pos = 0; pos < positions; ++pos) {
                double mean = 0.0;
                for (int64_t r = 0; r < b; ++r) mean += h[r * positions + pos];
                mean /= static_cast<double>(b);
                double var = 0.0;
                for (int64_t r = 0; r < b; ++r) {
                    double diff = h[r * positions + pos] - mean;
                    var += diff * diff;
                }
                acc += var / static_cast<double>(b);
            }
            per_layer.push_back(acc / static_cast<double>(positions));
        }
        profile.sigma_levels.push_back(sigma);
        profile.variance.push_back(std::move(per_layer));
    }
    (void)d;
    return profile;
}

}  // namespace edmd
