#include "edmd/rng.hpp"

#include <cmath>

namespace edmd {
namespace {

// SplitMix64 finalizer; full-period mixing of a 64-bit state.
uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t mix2(uint64_t a, uint64_t b) {
    return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

SeededStream::SeededStream(uint64_t seed, uint64_t counter) : seed_(seed), counter_(counter) {}

SeededStream SeededStream::child(uint64_t stream_id) const {
    return SeededStream(mix2(seed_, stream_id));
}

uint64_t SeededStream::next_u64() {
    return mix2(seed_, counter_++);
}

double SeededStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededStream::gaussian() {
    // u1 shifted into (0, 1] so the log is finite.
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

Tensor SeededStream::uniform(Shape shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = uniform();
    return t;
}

Tensor SeededStream::gaussian(Shape shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = gaussian();
    return t;
}

}  // namespace edmd
