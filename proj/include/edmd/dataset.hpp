#pragma once

#include <memory>
#include <vector>

#include "edmd/denoiser.hpp"
#include "edmd/gmm.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"

namespace edmd {

struct DatasetSpec {
    enum class Kind { Gmm2D, ToySignal1D };
    Kind kind = Kind::Gmm2D;
    int64_t sample_count = 8192;
    int64_t categories = 4;
    int64_t tempo_buckets = 4;
    // Gmm2D: component means sit on a circle of this radius with isotropic
    // covariance component_var.
    double component_radius = 0.5;
    double component_var = 0.01;
    // ToySignal1D
    int64_t sequence_length = 16;

    void validate() const;
    int64_t dim() const;
};

struct SyntheticDataset {
    DatasetSpec spec;
    Tensor samples;  // (N, D)
    std::vector<Condition> conditions;
    // Exact oracle for Gmm2D (component k <-> category k); null for signals.
    std::shared_ptr<GmmOracle> oracle;

    int64_t size() const { return samples.dim(0); }
    int64_t dim() const { return samples.dim(1); }

    // Gathers a batch by row indices.
    Tensor gather(std::span<const int64_t> rows) const;
    std::vector<Condition> gather_conditions(std::span<const int64_t> rows) const;
};

SyntheticDataset generate_dataset(const DatasetSpec& spec, SeededStream& stream);

// The mixture the Gmm2D spec describes, exposed so oracles can be built
// without sampling.
GmmOracle make_gmm2d_oracle(const DatasetSpec& spec);

}  // namespace edmd
