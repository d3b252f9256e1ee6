#pragma once

#include <cstdint>

#include "edmd/tensor.hpp"

namespace edmd {

// Counter-based random stream. Every draw is a pure function of
// (seed, counter), so a stream can be reconstructed from those two values and
// identical seeds always replay the identical sequence.
class SeededStream {
  public:
    explicit SeededStream(uint64_t seed, uint64_t counter = 0);

    // Independent stream derived from (seed, stream_id); used for per-sample
    // parallel draws.
    SeededStream child(uint64_t stream_id) const;

    uint64_t next_u64();
    double uniform();    // [0, 1)
    double gaussian();   // standard normal, Box-Muller

    Tensor uniform(Shape shape);
    Tensor gaussian(Shape shape);

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

  private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace edmd
