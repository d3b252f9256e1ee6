#pragma once

#include <span>

#include "edmd/tensor.hpp"

namespace edmd {

// Distinguished null category used by classifier-free guidance.
inline constexpr int kNullCategory = -1;

struct Condition {
    int category = kNullCategory;
    int tempo = 0;
};

inline Condition null_condition(const Condition& c) {
    return Condition{kNullCategory, c.tempo};
}

// A preconditioned denoiser: (x, sigma, condition) -> E[clean | x, sigma].
// Backed either by a network or by an analytic oracle. `cond` is empty for
// fully unconditional models, otherwise one entry per row of x.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    virtual Tensor denoise(const Tensor& x, double sigma, std::span<const Condition> cond) const = 0;
};

}  // namespace edmd
