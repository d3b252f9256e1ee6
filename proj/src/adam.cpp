#include "edmd/adam.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

void AdamState::step(std::span<const Var> params) {
    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const Var& p : params) {
            m_.push_back(Tensor::zeros(p.value().shape()));
            v_.push_back(Tensor::zeros(p.value().shape()));
        }
    }
    if (m_.size() != params.size()) {
        throw ShapeError("adam: parameter count changed from " + std::to_string(m_.size()) + " to " +
                         std::to_string(params.size()));
    }
    // Validate everything before mutating anything.
    for (size_t i = 0; i < params.size(); ++i) {
        const Var& p = params[i];
        if (p.has_grad()) {
            if (!same_shape(p.grad().shape(), p.value().shape())) {
                throw ShapeError("adam: grad shape " + shape_str(p.grad().shape()) + " does not match param " +
                                 shape_str(p.value().shape()));
            }
            if (!p.grad().all_finite()) {
                throw NumericError("adam: non-finite gradient for parameter '" + p.name() + "'");
            }
        }
    }
    ++step_count_;
    double t = static_cast<double>(step_count_);
    double bc1 = 1.0 - std::pow(config_.beta1, t);
    double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        const Var& p = params[i];
        Tensor& theta = const_cast<Var&>(p).value_mut();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        const bool has = p.has_grad();
        const Tensor* g = has ? &p.grad() : nullptr;
        for (int64_t j = 0; j < theta.size(); ++j) {
            double gj = has ? (*g)[j] : 0.0;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            theta[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

}  // namespace edmd
