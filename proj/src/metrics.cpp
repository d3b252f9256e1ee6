#include "edmd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "edmd/errors.hpp"

namespace edmd {

namespace {

double sq_dist(const double* a, const double* b, int64_t d) {
    double acc = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

void require_batch(const Tensor& t, const char* who) {
    if (t.rank() != 2 || t.dim(0) < 1) {
        throw ShapeError(std::string(who) + ": expected a nonempty (N, D) sample set, got " + shape_str(t.shape()));
    }
}

// Cyclic Jacobi eigendecomposition for symmetric matrices. Returns
// eigenvalues; eigvecs (row-major, columns are eigenvectors) optional.
std::vector<double> symmetric_eigen(std::vector<double> a, int64_t d, std::vector<double>* eigvecs) {
    std::vector<double> v(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < d; ++i) v[static_cast<size_t>(i * d + i)] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = i + 1; j < d; ++j) off += a[static_cast<size_t>(i * d + j)] * a[static_cast<size_t>(i * d + j)];
        }
        if (off < 1e-30) break;
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t q = p + 1; q < d; ++q) {
                double apq = a[static_cast<size_t>(p * d + q)];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[static_cast<size_t>(p * d + p)];
                double aqq = a[static_cast<size_t>(q * d + q)];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int64_t k = 0; k < d; ++k) {
                    double akp = a[static_cast<size_t>(k * d + p)];
                    double akq = a[static_cast<size_t>(k * d + q)];
                    a[static_cast<size_t>(k * d + p)] = c * akp - s * akq;
                    a[static_cast<size_t>(k * d + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < d; ++k) {
                    double apk = a[static_cast<size_t>(p * d + k)];
                    double aqk = a[static_cast<size_t>(q * d + k)];
                    a[static_cast<size_t>(p * d + k)] = c * apk - s * aqk;
                    a[static_cast<size_t>(q * d + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < d; ++k) {
                    double vkp = v[static_cast<size_t>(k * d + p)];
                    double vkq = v[static_cast<size_t>(k * d + q)];
                    v[static_cast<size_t>(k * d + p)] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k * d + q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<size_t>(d));
    for (int64_t i = 0; i < d; ++i) eig[static_cast<size_t>(i)] = a[static_cast<size_t>(i * d + i)];
    if (eigvecs) *eigvecs = std::move(v);
    return eig;
}

// Symmetric PSD square root via eigendecomposition; small negative
// eigenvalues are clamped, large ones are an error.
std::vector<double> psd_sqrt(const std::vector<double>& m, int64_t d) {
    std::vector<double> vecs;
    std::vector<double> eig = symmetric_eigen(m, d, &vecs);
    double max_eig = 0.0;
    for (double e : eig) max_eig = std::max(max_eig, std::abs(e));
    std::vector<double> root(static_cast<size_t>(d * d), 0.0);
    for (int64_t k = 0; k < d; ++k) {
        double e = eig[static_cast<size_t>(k)];
        if (e < -1e-8 * std::max(1.0, max_eig)) {
            throw NumericError("frechet_gauss: covariance not positive semidefinite after regularization");
        }
        double s = std::sqrt(std::max(e, 0.0));
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                root[static_cast<size_t>(i * d + j)] +=
                    s * vecs[static_cast<size_t>(i * d + k)] * vecs[static_cast<size_t>(j * d + k)];
            }
        }
    }
    return root;
}

double frechet_from_moments(const Tensor& mu_x, const Tensor& cov_x, const Tensor& mu_y, const Tensor& cov_y) {
    int64_t d = mu_x.dim(0);
    double mean_term = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double diff = mu_x[i] - mu_y[i];
        mean_term += diff * diff;
    }
    double tr_x = 0.0, tr_y = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        tr_x += cov_x[i * d + i];
        tr_y += cov_y[i * d + i];
    }
    // tr((Cx Cy)^{1/2}) = tr((Cx^{1/2} Cy Cx^{1/2})^{1/2})
    std::vector<double> cx(cov_x.vec());
    double reg = 1e-12 * std::max(1.0, (tr_x + tr_y) / static_cast<double>(d));
    for (int64_t i = 0; i < d; ++i) cx[static_cast<size_t>(i * d + i)] += reg;
    std::vector<double> a = psd_sqrt(cx, d);
    std::vector<double> m(static_cast<size_t>(d * d), 0.0);
    // m = a * cy * a
    std::vector<double> tmp(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t k = 0; k < d; ++k) {
            double aik = a[static_cast<size_t>(i * d + k)];
            if (aik == 0.0) continue;
            for (int64_t j = 0; j < d; ++j) {
                tmp[static_cast<size_t>(i * d + j)] += aik * cov_y[k * d + j];
            }
        }
    }
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t k = 0; k < d; ++k) {
            double tik = tmp[static_cast<size_t>(i * d + k)];
            if (tik == 0.0) continue;
            for (int64_t j = 0; j < d; ++j) {
                m[static_cast<size_t>(i * d + j)] += tik * a[static_cast<size_t>(k * d + j)];
            }
        }
    }
    // Symmetrize against roundoff before the eigendecomposition.
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = i + 1; j < d; ++j) {
            double avg = 0.5 * (m[static_cast<size_t>(i * d + j)] + m[static_cast<size_t>(j * d + i)]);
            m[static_cast<size_t>(i * d + j)] = avg;
            m[static_cast<size_t>(j * d + i)] = avg;
        }
    }
    std::vector<double> eig = symmetric_eigen(m, d, nullptr);
    double tr_sqrt = 0.0;
    for (double e : eig) tr_sqrt += std::sqrt(std::max(e, 0.0));
    return mean_term + tr_x + tr_y - 2.0 * tr_sqrt;
}

}  // namespace

Tensor sample_mean(const Tensor& x) {
    require_batch(x, "sample_mean");
    int64_t n = x.dim(0), d = x.dim(1);
    Tensor mu({d});
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t j = 0; j < d; ++j) mu[j] += x[r * d + j];
    }
    for (int64_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(n);
    return mu;
}

Tensor sample_cov(const Tensor& x) {
    require_batch(x, "sample_cov");
    int64_t n = x.dim(0), d = x.dim(1);
    if (n < 2) throw ShapeError("sample_cov: need at least two samples");
    Tensor mu = sample_mean(x);
    Tensor cov({d, d});
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t i = 0; i < d; ++i) {
            double di = x[r * d + i] - mu[i];
            for (int64_t j = 0; j < d; ++j) {
                cov[i * d + j] += di * (x[r * d + j] - mu[j]);
            }
        }
    }
    for (int64_t i = 0; i < d * d; ++i) cov[i] /= static_cast<double>(n - 1);
    return cov;
}

namespace {

// Rows sorted lexicographically; makes the accumulation order, and hence the
// result bits, independent of row permutation and argument order.
Tensor canonical_rows(const Tensor& x) {
    int64_t n = x.dim(0), d = x.dim(1);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        const double* ra = x.data() + a * d;
        const double* rb = x.data() + b * d;
        for (int64_t j = 0; j < d; ++j) {
            if (ra[j] != rb[j]) return ra[j] < rb[j];
        }
        return false;
    });
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        std::copy(x.data() + order[static_cast<size_t>(i)] * d, x.data() + (order[static_cast<size_t>(i)] + 1) * d,
                  out.data() + i * d);
    }
    return out;
}

bool rows_less(const Tensor& a, const Tensor& b) {
    int64_t na = a.size(), nb = b.size();
    for (int64_t i = 0; i < std::min(na, nb); ++i) {
        if (a[i] != b[i]) return a[i] < b[i];
    }
    return na < nb;
}

}  // namespace

double mmd_rbf(const Tensor& x, const Tensor& y, double bandwidth) {
    require_batch(x, "mmd_rbf");
    require_batch(y, "mmd_rbf");
    if (x.dim(1) != y.dim(1)) throw ShapeError("mmd_rbf: dimension mismatch");
    if (bandwidth <= 0) throw DomainError("mmd_rbf: bandwidth must be > 0");
    if (x.dim(0) < 2 || y.dim(0) < 2) {
        throw ShapeError("mmd_rbf: unbiased estimator needs at least two samples per set");
    }
    Tensor a = canonical_rows(x);
    Tensor b = canonical_rows(y);
    if (rows_less(b, a)) std::swap(a, b);
    int64_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
    double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            if (i == j) continue;
            kaa += std::exp(-gamma * sq_dist(a.data() + i * d, a.data() + j * d, d));
        }
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            if (i == j) continue;
            kbb += std::exp(-gamma * sq_dist(b.data() + i * d, b.data() + j * d, d));
        }
    }
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            kab += std::exp(-gamma * sq_dist(a.data() + i * d, b.data() + j * d, d));
        }
    }
    return kaa / static_cast<double>(m * (m - 1)) + kbb / static_cast<double>(n * (n - 1)) -
           2.0 * kab / static_cast<double>(m * n);
}

double median_heuristic_bandwidth(const Tensor& x, const Tensor& y) {
    require_batch(x, "median_heuristic_bandwidth");
    require_batch(y, "median_heuristic_bandwidth");
    int64_t d = x.dim(1);
    int64_t total = x.dim(0) + y.dim(0);
    std::vector<const double*> rows;
    rows.reserve(static_cast<size_t>(total));
    for (int64_t i = 0; i < x.dim(0); ++i) rows.push_back(x.data() + i * d);
    for (int64_t i = 0; i < y.dim(0); ++i) rows.push_back(y.data() + i * d);
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(total * (total - 1) / 2));
    for (int64_t i = 0; i < total; ++i) {
        for (int64_t j = i + 1; j < total; ++j) {
            dists.push_back(std::sqrt(sq_dist(rows[static_cast<size_t>(i)], rows[static_cast<size_t>(j)], d)));
        }
    }
    if (dists.empty()) throw ShapeError("median_heuristic_bandwidth: need at least two pooled samples");
    std::nth_element(dists.begin(), dists.begin() + static_cast<int64_t>(dists.size() / 2), dists.end());
    double med = dists[dists.size() / 2];
    if (med <= 0) {
        double mean = std::accumulate(dists.begin(), dists.end(), 0.0) / static_cast<double>(dists.size());
        if (mean <= 0) throw DomainError("median_heuristic_bandwidth: all pooled samples identical");
        return mean;
    }
    return med;
}

double frechet_gauss(const Tensor& x, const Tensor& y) {
    require_batch(x, "frechet_gauss");
    require_batch(y, "frechet_gauss");
    if (x.dim(1) != y.dim(1)) throw ShapeError("frechet_gauss: dimension mismatch");
    if (x.dim(0) <= x.dim(1) || y.dim(0) <= y.dim(1)) {
        throw ShapeError("frechet_gauss: sample counts must exceed the dimension");
    }
    return frechet_from_moments(sample_mean(x), sample_cov(x), sample_mean(y), sample_cov(y));
}

double frechet_gauss_to_moments(const Tensor& x, const Tensor& mean, const Tensor& cov) {
    require_batch(x, "frechet_gauss_to_moments");
    if (x.dim(0) <= x.dim(1)) throw ShapeError("frechet_gauss_to_moments: sample count must exceed the dimension");
    return frechet_from_moments(sample_mean(x), sample_cov(x), mean, cov);
}

PrdcResult prdc(const Tensor& x_real, const Tensor& x_fake, int64_t k) {
    require_batch(x_real, "prdc");
    require_batch(x_fake, "prdc");
    if (x_real.dim(1) != x_fake.dim(1)) throw ShapeError("prdc: dimension mismatch");
    int64_t nr = x_real.dim(0), nf = x_fake.dim(0), d = x_real.dim(1);
    if (k < 1 || k >= std::min(nr, nf)) {
        throw DomainError("prdc: need 1 <= k < min sample count, got k = " + std::to_string(k));
    }
    auto knn_radii = [&](const Tensor& pts) {
        int64_t n = pts.dim(0);
        std::vector<double> radii(static_cast<size_t>(n));
        std::vector<double> dists(static_cast<size_t>(n - 1));
        for (int64_t i = 0; i < n; ++i) {
            size_t w = 0;
            for (int64_t j = 0; j < n; ++j) {
                if (i == j) continue;
                dists[w++] = sq_dist(pts.data() + i * d, pts.data() + j * d, d);
            }
            std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
            radii[static_cast<size_t>(i)] = std::sqrt(dists[static_cast<size_t>(k - 1)]);
        }
        return radii;
    };
    std::vector<double> real_radii = knn_radii(x_real);
    std::vector<double> fake_radii = knn_radii(x_fake);
    double max_radius = 0.0;
    for (double r : real_radii) max_radius = std::max(max_radius, r);
    for (double r : fake_radii) max_radius = std::max(max_radius, r);
    if (max_radius == 0.0) {
        throw DomainError("prdc: degenerate sample sets (all k-NN radii are zero)");
    }

    double density = 0.0;
    std::vector<char> covered(static_cast<size_t>(nr), 0);
    std::vector<char> recalled(static_cast<size_t>(nr), 0);
    for (int64_t j = 0; j < nf; ++j) {
        const double* f = x_fake.data() + j * d;
        for (int64_t i = 0; i < nr; ++i) {
            double dist = std::sqrt(sq_dist(f, x_real.data() + i * d, d));
            if (dist <= real_radii[static_cast<size_t>(i)]) {
                density += 1.0;
                covered[static_cast<size_t>(i)] = 1;
            }
            if (dist <= fake_radii[static_cast<size_t>(j)]) {
                recalled[static_cast<size_t>(i)] = 1;
            }
        }
    }
    PrdcResult res;
    res.density = density / (static_cast<double>(k) * static_cast<double>(nf));
    res.coverage = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(nr);
    res.recall = static_cast<double>(std::count(recalled.begin(), recalled.end(), 1)) / static_cast<double>(nr);
    return res;
}

double rtf(double duration_s, int64_t batch, double latency_s) {
    if (latency_s <= 0) throw DomainError("rtf: latency must be > 0");
    return static_cast<double>(batch) * duration_s / latency_s;
}

std::vector<int64_t> rejection_sample(std::span<const double> scores, double ratio) {
    if (ratio < 0 || ratio >= 1) throw DomainError("rejection_sample: ratio must be in [0, 1)");
    int64_t n = static_cast<int64_t>(scores.size());
    int64_t keep = static_cast<int64_t>(std::ceil((1.0 - ratio) * static_cast<double>(n)));
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)]) {
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        }
        return a < b;
    });
    order.resize(static_cast<size_t>(keep));
    return order;
}

}  // namespace edmd
