#pragma once

#include <span>
#include <vector>

#include "edmd/tensor.hpp"

namespace edmd {

// Unbiased squared-MMD estimate with Gaussian kernel
// k(x, y) = exp(-||x - y||^2 / (2 bandwidth^2)).
double mmd_rbf(const Tensor& x, const Tensor& y, double bandwidth);

// Median pairwise distance over the pooled set.
double median_heuristic_bandwidth(const Tensor& x, const Tensor& y);

// ||mu_x - mu_y||^2 + tr(Cx + Cy - 2 (Cx Cy)^{1/2}) from sample moments.
double frechet_gauss(const Tensor& x, const Tensor& y);
// Same with exact moments for the second distribution.
double frechet_gauss_to_moments(const Tensor& x, const Tensor& mean, const Tensor& cov);

struct PrdcResult {
    double density = 0.0;
    double recall = 0.0;
    double coverage = 0.0;
};

// k-NN manifold estimates: density and coverage against the real k-NN radii,
// recall against the fake radii.
PrdcResult prdc(const Tensor& x_real, const Tensor& x_fake, int64_t k);

// Real-time factor: batch * duration / latency.
double rtf(double duration_s, int64_t batch, double latency_s);

// Keeps the ceil((1 - ratio) * n) highest-scoring entries; ties keep the
// lower original index. Returned indices are ordered best-first.
std::vector<int64_t> rejection_sample(std::span<const double> scores, double ratio);

// Sample moments helpers (unbiased covariance).
Tensor sample_mean(const Tensor& x);
Tensor sample_cov(const Tensor& x);

}  // namespace edmd
