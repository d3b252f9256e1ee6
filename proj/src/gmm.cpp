#include "edmd/gmm.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

// Dense lower-triangular Cholesky for small SPD matrices.
struct Cholesky {
    int64_t d;
    std::vector<double> l;  // row-major lower triangle (full matrix storage)

    explicit Cholesky(const Tensor& a) : d(a.dim(0)), l(static_cast<size_t>(d * d), 0.0) {
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j <= i; ++j) {
                double s = a[i * d + j];
                for (int64_t k = 0; k < j; ++k) s -= l[static_cast<size_t>(i * d + k)] * l[static_cast<size_t>(j * d + k)];
                if (i == j) {
                    if (s <= 0.0) throw NumericError("gmm: covariance + sigma^2 I not positive definite");
                    l[static_cast<size_t>(i * d + j)] = std::sqrt(s);
                } else {
                    l[static_cast<size_t>(i * d + j)] = s / l[static_cast<size_t>(j * d + j)];
                }
            }
        }
    }

    // Solves A y = b in place (forward then backward substitution).
    void solve(double* b) const {
        for (int64_t i = 0; i < d; ++i) {
            double s = b[i];
            for (int64_t k = 0; k < i; ++k) s -= l[static_cast<size_t>(i * d + k)] * b[k];
            b[i] = s / l[static_cast<size_t>(i * d + i)];
        }
        for (int64_t i = d; i-- > 0;) {
            double s = b[i];
            for (int64_t k = i + 1; k < d; ++k) s -= l[static_cast<size_t>(k * d + i)] * b[k];
            b[i] = s / l[static_cast<size_t>(i * d + i)];
        }
    }

    // y = L z for sampling.
    void lower_mul(const double* z, double* y) const {
        for (int64_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (int64_t k = 0; k <= i; ++k) s += l[static_cast<size_t>(i * d + k)] * z[k];
            y[i] = s;
        }
    }

    double logdet() const {
        double s = 0.0;
        for (int64_t i = 0; i < d; ++i) s += std::log(l[static_cast<size_t>(i * d + i)]);
        return 2.0 * s;
    }
};

Tensor smoothed_cov(const Tensor& cov, double sigma) {
    Tensor a = cov;
    int64_t d = cov.dim(0);
    double s2 = sigma * sigma;
    for (int64_t i = 0; i < d; ++i) a[i * d + i] += s2;
    return a;
}

}  // namespace

GmmOracle::GmmOracle(std::vector<GmmComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw ConfigError("gmm: need at least one component");
    dim_ = components_[0].mean.dim(0);
    double wsum = 0.0;
    for (const auto& c : components_) {
        if (c.weight < 0) throw ConfigError("gmm: component weights must be nonnegative");
        if (c.mean.rank() != 1 || c.mean.dim(0) != dim_) throw ShapeError("gmm: mean shape mismatch");
        if (c.cov.rank() != 2 || c.cov.dim(0) != dim_ || c.cov.dim(1) != dim_) {
            throw ShapeError("gmm: covariance shape mismatch");
        }
        for (int64_t i = 0; i < dim_; ++i) {
            for (int64_t j = 0; j < i; ++j) {
                if (std::abs(c.cov[i * dim_ + j] - c.cov[j * dim_ + i]) > 1e-12) {
                    throw ConfigError("gmm: covariance must be symmetric");
                }
            }
        }
        Cholesky chk(c.cov);  // throws if not SPD
        (void)chk;
        wsum += c.weight;
    }
    if (std::abs(wsum - 1.0) > 1e-12) {
        throw ConfigError("gmm: component weights must sum to 1, got " + std::to_string(wsum));
    }
}

double GmmOracle::component_loglik(const double* x, int64_t k, double sigma) const {
    const GmmComponent& c = components_[static_cast<size_t>(k)];
    Cholesky chol(sigma > 0 ? smoothed_cov(c.cov, sigma) : c.cov);
    std::vector<double> diff(static_cast<size_t>(dim_));
    for (int64_t i = 0; i < dim_; ++i) diff[static_cast<size_t>(i)] = x[i] - c.mean[i];
    std::vector<double> solved = diff;
    chol.solve(solved.data());
    double quad = 0.0;
    for (int64_t i = 0; i < dim_; ++i) quad += diff[static_cast<size_t>(i)] * solved[static_cast<size_t>(i)];
    return -0.5 * (static_cast<double>(dim_) * kLogTwoPi + chol.logdet() + quad);
}

Tensor GmmOracle::denoise(const Tensor& x, double sigma, std::optional<int> component) const {
    if (sigma <= 0) throw DomainError("gmm denoise: sigma must be > 0");
    if (x.rank() != 2 || x.dim(1) != dim_) throw ShapeError("gmm denoise: expected (B, " + std::to_string(dim_) + ")");
    int64_t b = x.dim(0);
    int64_t k_count = component_count();
    std::vector<int64_t> active;
    if (component) {
        if (*component < 0 || *component >= k_count) throw ConfigError("gmm denoise: component out of range");
        active = {*component};
    } else {
        for (int64_t k = 0; k < k_count; ++k) active.push_back(k);
    }
    // Per component: Cholesky of C + sigma^2 I and the posterior-mean map
    // m_k + C_k (C_k + sigma^2 I)^{-1} (x - m_k).
    std::vector<Cholesky> chols;
    chols.reserve(active.size());
    for (int64_t k : active) chols.emplace_back(smoothed_cov(components_[static_cast<size_t>(k)].cov, sigma));

    Tensor out({b, dim_});
    std::vector<double> loglik(active.size());
    std::vector<double> diff(static_cast<size_t>(dim_)), solved(static_cast<size_t>(dim_)),
        post(static_cast<size_t>(dim_));
    for (int64_t r = 0; r < b; ++r) {
        const double* xr = x.data() + r * dim_;
        double mx = -1e300;
        for (size_t a = 0; a < active.size(); ++a) {
            const GmmComponent& c = components_[static_cast<size_t>(active[a])];
            for (int64_t i = 0; i < dim_; ++i) diff[static_cast<size_t>(i)] = xr[i] - c.mean[i];
            solved = diff;
            chols[a].solve(solved.data());
            double quad = 0.0;
            for (int64_t i = 0; i < dim_; ++i) quad += diff[static_cast<size_t>(i)] * solved[static_cast<size_t>(i)];
            loglik[a] = std::log(c.weight) - 0.5 * (static_cast<double>(dim_) * kLogTwoPi + chols[a].logdet() + quad);
            mx = std::max(mx, loglik[a]);
        }
        double z = 0.0;
        for (double& v : loglik) {
            v = std::exp(v - mx);
            z += v;
        }
        double* o = out.data() + r * dim_;
        for (int64_t i = 0; i < dim_; ++i) o[i] = 0.0;
        for (size_t a = 0; a < active.size(); ++a) {
            double resp = loglik[a] / z;
            const GmmComponent& c = components_[static_cast<size_t>(active[a])];
            for (int64_t i = 0; i < dim_; ++i) diff[static_cast<size_t>(i)] = xr[i] - c.mean[i];
            solved = diff;
            chols[a].solve(solved.data());
            // m + C * solved
            for (int64_t i = 0; i < dim_; ++i) {
                double acc = c.mean[i];
                for (int64_t j = 0; j < dim_; ++j) {
                    acc += c.cov[i * dim_ + j] * solved[static_cast<size_t>(j)];
                }
                post[static_cast<size_t>(i)] = acc;
            }
            for (int64_t i = 0; i < dim_; ++i) o[i] += resp * post[static_cast<size_t>(i)];
        }
    }
    return out;
}

Tensor GmmOracle::score(const Tensor& x, double sigma) const {
    if (sigma <= 0) throw DomainError("gmm score: sigma must be > 0");
    if (x.rank() != 2 || x.dim(1) != dim_) throw ShapeError("gmm score: expected (B, " + std::to_string(dim_) + ")");
    int64_t b = x.dim(0);
    int64_t k_count = component_count();
    std::vector<Cholesky> chols;
    chols.reserve(static_cast<size_t>(k_count));
    for (int64_t k = 0; k < k_count; ++k) chols.emplace_back(smoothed_cov(components_[static_cast<size_t>(k)].cov, sigma));
    Tensor out({b, dim_});
    std::vector<double> loglik(static_cast<size_t>(k_count));
    std::vector<double> diff(static_cast<size_t>(dim_)), solved(static_cast<size_t>(dim_));
    std::vector<std::vector<double>> comp_solved(static_cast<size_t>(k_count),
                                                 std::vector<double>(static_cast<size_t>(dim_)));
    for (int64_t r = 0; r < b; ++r) {
        const double* xr = x.data() + r * dim_;
        double mx = -1e300;
        for (int64_t k = 0; k < k_count; ++k) {
            const GmmComponent& c = components_[static_cast<size_t>(k)];
            for (int64_t i = 0; i < dim_; ++i) diff[static_cast<size_t>(i)] = xr[i] - c.mean[i];
            solved = diff;
            chols[static_cast<size_t>(k)].solve(solved.data());
            comp_solved[static_cast<size_t>(k)] = solved;
            double quad = 0.0;
            for (int64_t i = 0; i < dim_; ++i) quad += diff[static_cast<size_t>(i)] * solved[static_cast<size_t>(i)];
            loglik[static_cast<size_t>(k)] =
                std::log(c.weight) -
                0.5 * (static_cast<double>(dim_) * kLogTwoPi + chols[static_cast<size_t>(k)].logdet() + quad);
            mx = std::max(mx, loglik[static_cast<size_t>(k)]);
        }
        double z = 0.0;
        for (double& v : loglik) {
            v = std::exp(v - mx);
            z += v;
        }
        double* o = out.data() + r * dim_;
        for (int64_t i = 0; i < dim_; ++i) o[i] = 0.0;
        for (int64_t k = 0; k < k_count; ++k) {
            double resp = loglik[static_cast<size_t>(k)] / z;
            // grad log N = -(C + sigma^2 I)^{-1} (x - m)
            for (int64_t i = 0; i < dim_; ++i) {
                o[i] -= resp * comp_solved[static_cast<size_t>(k)][static_cast<size_t>(i)];
            }
        }
    }
    return out;
}

std::vector<int> GmmOracle::map_component(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != dim_) throw ShapeError("gmm map_component: expected (B, D)");
    int64_t b = x.dim(0);
    std::vector<int> out(static_cast<size_t>(b));
    for (int64_t r = 0; r < b; ++r) {
        const double* xr = x.data() + r * dim_;
        double best = -1e300;
        int best_k = 0;
        for (int64_t k = 0; k < component_count(); ++k) {
            double ll = std::log(components_[static_cast<size_t>(k)].weight) + component_loglik(xr, k, 0.0);
            if (ll > best) {
                best = ll;
                best_k = static_cast<int>(k);
            }
        }
        out[static_cast<size_t>(r)] = best_k;
    }
    return out;
}

Tensor GmmOracle::sample(int64_t n, SeededStream& stream, std::vector<int>* component_out) const {
    Tensor out({n, dim_});
    if (component_out) component_out->assign(static_cast<size_t>(n), 0);
    std::vector<Cholesky> chols;
    for (const auto& c : components_) chols.emplace_back(c.cov);
    std::vector<double> z(static_cast<size_t>(dim_)), y(static_cast<size_t>(dim_));
    for (int64_t r = 0; r < n; ++r) {
        double u = stream.uniform();
        size_t k = 0;
        double acc = 0.0;
        for (; k < components_.size(); ++k) {
            acc += components_[k].weight;
            if (u < acc) break;
        }
        if (k == components_.size()) k = components_.size() - 1;
        for (int64_t i = 0; i < dim_; ++i) z[static_cast<size_t>(i)] = stream.gaussian();
        chols[k].lower_mul(z.data(), y.data());
        double* o = out.data() + r * dim_;
        for (int64_t i = 0; i < dim_; ++i) o[i] = components_[k].mean[i] + y[static_cast<size_t>(i)];
        if (component_out) (*component_out)[static_cast<size_t>(r)] = static_cast<int>(k);
    }
    return out;
}

Tensor GmmOracle::mixture_mean() const {
    Tensor m({dim_});
    for (const auto& c : components_) {
        for (int64_t i = 0; i < dim_; ++i) m[i] += c.weight * c.mean[i];
    }
    return m;
}

Tensor GmmDenoiser::denoise(const Tensor& x, double sigma, std::span<const Condition> cond) const {
    if (cond.empty()) return oracle_.denoise(x, sigma);
    if (static_cast<int64_t>(cond.size()) != x.dim(0)) {
        throw ShapeError("gmm denoiser: condition count does not match batch");
    }
    // Group rows by category so each group is denoised with its conditional
    // mixture in one pass.
    Tensor out({x.dim(0), x.dim(1)});
    int64_t d = x.dim(1);
    std::vector<char> done(cond.size(), 0);
    for (size_t i = 0; i < cond.size(); ++i) {
        if (done[i]) continue;
        int cat = cond[i].category;
        std::vector<int64_t> rows;
        for (size_t j = i; j < cond.size(); ++j) {
            if (!done[j] && cond[j].category == cat) {
                rows.push_back(static_cast<int64_t>(j));
                done[j] = 1;
            }
        }
        Tensor sub({static_cast<int64_t>(rows.size()), d});
        for (size_t r = 0; r < rows.size(); ++r) {
            std::copy(x.data() + rows[r] * d, x.data() + (rows[r] + 1) * d, sub.data() + static_cast<int64_t>(r) * d);
        }
        std::optional<int> comp;
        if (cat != kNullCategory) {
            if (cat < 0 || cat >= oracle_.component_count()) {
                throw ConfigError("gmm denoiser: category " + std::to_string(cat) + " out of range");
            }
            comp = cat;
        }
        Tensor sub_out = oracle_.denoise(sub, sigma, comp);
        for (size_t r = 0; r < rows.size(); ++r) {
            std::copy(sub_out.data() + static_cast<int64_t>(r) * d, sub_out.data() + static_cast<int64_t>(r + 1) * d,
                      out.data() + rows[r] * d);
        }
    }
    return out;
}

}  // namespace edmd
