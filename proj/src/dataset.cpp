#include "edmd/dataset.hpp"

#include <cmath>

#include "edmd/errors.hpp"

namespace edmd {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void DatasetSpec::validate() const {
    if (sample_count < 1) throw ConfigError("dataset.samples must be >= 1");
    if (categories < 1) throw ConfigError("dataset.categories must be >= 1");
    if (tempo_buckets < 1) throw ConfigError("dataset.tempo_buckets must be >= 1");
    if (kind == Kind::Gmm2D) {
        if (component_var <= 0) throw ConfigError("dataset.component_var must be > 0");
        if (component_radius <= 0) throw ConfigError("dataset.component_radius must be > 0");
    } else {
        if (sequence_length < 2) throw ConfigError("dataset.sequence_length must be >= 2");
    }
}

int64_t DatasetSpec::dim() const {
    return kind == Kind::Gmm2D ? 2 : sequence_length;
}

GmmOracle make_gmm2d_oracle(const DatasetSpec& spec) {
    spec.validate();
    if (spec.kind != DatasetSpec::Kind::Gmm2D) throw ConfigError("gmm oracle requested for a non-mixture dataset");
    std::vector<GmmComponent> comps;
    int64_t k = spec.categories;
    for (int64_t i = 0; i < k; ++i) {
        double angle = kTwoPi * (static_cast<double>(i) + 0.5) / static_cast<double>(k);
        Tensor mean({2}, {spec.component_radius * std::cos(angle), spec.component_radius * std::sin(angle)});
        Tensor cov({2, 2}, {spec.component_var, 0.0, 0.0, spec.component_var});
        comps.push_back(GmmComponent{1.0 / static_cast<double>(k), std::move(mean), std::move(cov)});
    }
    return GmmOracle(std::move(comps));
}

Tensor SyntheticDataset::gather(std::span<const int64_t> rows) const {
    int64_t d = dim();
    Tensor out({static_cast<int64_t>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
        int64_t r = rows[i];
        if (r < 0 || r >= size()) throw Error("dataset gather: row out of range");
        std::copy(samples.data() + r * d, samples.data() + (r + 1) * d, out.data() + static_cast<int64_t>(i) * d);
    }
    return out;
}

std::vector<Condition> SyntheticDataset::gather_conditions(std::span<const int64_t> rows) const {
    std::vector<Condition> out(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) out[i] = conditions[static_cast<size_t>(rows[i])];
    return out;
}

SyntheticDataset generate_dataset(const DatasetSpec& spec, SeededStream& stream) {
    spec.validate();
    SyntheticDataset ds;
    ds.spec = spec;
    if (spec.kind == DatasetSpec::Kind::Gmm2D) {
        ds.oracle = std::make_shared<GmmOracle>(make_gmm2d_oracle(spec));
        std::vector<int> comps;
        ds.samples = ds.oracle->sample(spec.sample_count, stream, &comps);
        ds.conditions.resize(static_cast<size_t>(spec.sample_count));
        for (int64_t i = 0; i < spec.sample_count; ++i) {
            int c = comps[static_cast<size_t>(i)];
            ds.conditions[static_cast<size_t>(i)] =
                Condition{c, static_cast<int>(c % static_cast<int>(spec.tempo_buckets))};
        }
        return ds;
    }
    // Bounded 1-D signals: category sets the carrier frequency, the tempo
    // bucket modulates the envelope rate.
    int64_t t = spec.sequence_length;
    ds.samples = Tensor({spec.sample_count, t});
    ds.conditions.resize(static_cast<size_t>(spec.sample_count));
    for (int64_t i = 0; i < spec.sample_count; ++i) {
        int cat = static_cast<int>(stream.next_u64() % static_cast<uint64_t>(spec.categories));
        int tempo = static_cast<int>(stream.next_u64() % static_cast<uint64_t>(spec.tempo_buckets));
        double amp = 0.4 + 0.5 * stream.uniform();
        double phase = kTwoPi * stream.uniform();
        double carrier = static_cast<double>(cat + 1);
        double rate = static_cast<double>(tempo + 1);
        for (int64_t j = 0; j < t; ++j) {
            double pos = static_cast<double>(j) / static_cast<double>(t);
            double envelope = 0.7 + 0.3 * std::cos(kTwoPi * rate * pos);
            ds.samples[i * t + j] = amp * envelope * std::sin(kTwoPi * carrier * pos + phase);
        }
        ds.conditions[static_cast<size_t>(i)] = Condition{cat, tempo};
    }
    return ds;
}

}  // namespace edmd
