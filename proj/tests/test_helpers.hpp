#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "edmd/autodiff.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd::testing {

// Central finite difference of a scalar-valued rebuildable expression with
// respect to one coordinate of one leaf parameter. The expression must be
// rebuilt from scratch on every call so perturbed values propagate.
inline double central_diff(const std::function<double()>& eval, Tensor& param, int64_t coord, double h = 1e-4) {
    double orig = param[coord];
    param[coord] = orig + h;
    double fp = eval();
    param[coord] = orig - h;
    double fm = eval();
    param[coord] = orig;
    return (fp - fm) / (2.0 * h);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

// Compares autodiff gradients against central differences on a random subset
// of coordinates of each parameter. `build` must construct the full forward
// graph from the current parameter values and return the scalar loss.
inline GradCheckResult grad_check(const std::function<Var()>& build, std::vector<Var>& params,
                                  SeededStream& pick, int64_t coords_per_param = 4, double h = 1e-4) {
    GradCheckResult res;
    Var loss = build();
    for (auto& p : params) p.zero_grad();
    loss.backward();
    std::vector<Tensor> grads;
    for (auto& p : params) grads.push_back(p.has_grad() ? p.grad() : Tensor::zeros(p.value().shape()));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& theta = params[pi].value_mut();
        for (int64_t c = 0; c < coords_per_param; ++c) {
            int64_t coord = static_cast<int64_t>(pick.next_u64() % static_cast<uint64_t>(theta.size()));
            auto eval = [&]() { return build().value().item(); };
            double fd = central_diff(eval, theta, coord, h);
            double ad = grads[pi][coord];
            double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
            double rel = std::abs(fd - ad) / denom;
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace edmd::testing
