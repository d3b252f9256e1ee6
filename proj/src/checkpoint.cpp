#include "edmd/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "edmd/errors.hpp"

namespace edmd {

namespace {

constexpr char kMagic[8] = {'E', 'D', 'M', 'D', 'C', 'K', 'P', '1'};

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v, const char* what) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError(std::string("checkpoint: truncated while reading ") + what);
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* what) {
    uint32_t len = 0;
    read_pod(is, len, what);
    if (len > (1u << 20)) throw IoError(std::string("checkpoint: implausible string length for ") + what);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw IoError(std::string("checkpoint: truncated while reading ") + what);
    return s;
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
    for (const auto& [n, t] : sections) {
        if (n == name) return &t;
    }
    return nullptr;
}

void CheckpointData::add(const std::string& name, Tensor value) {
    sections.emplace_back(name, std::move(value));
}

void CheckpointData::add_scalar(const std::string& name, double value) {
    sections.emplace_back(name, Tensor::scalar(value));
}

double CheckpointData::scalar(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw IoError("checkpoint: missing section '" + name + "'");
    return t->item();
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot open '" + tmp + "' for writing");
        os.write(kMagic, sizeof(kMagic));
        write_pod(os, data.version);
        write_pod(os, data.config_hash);
        write_string(os, data.stage);
        write_pod(os, data.step_count);
        write_pod(os, static_cast<uint32_t>(data.sections.size()));
        uint64_t checksum = 1469598103934665603ULL;
        for (const auto& [name, tensor] : data.sections) {
            write_string(os, name);
            write_pod(os, static_cast<uint32_t>(tensor.rank()));
            for (int64_t d : tensor.shape()) write_pod(os, d);
            os.write(reinterpret_cast<const char*>(tensor.data()),
                     static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(tensor.size())));
            checksum = fnv1a(checksum, name.data(), name.size());
            checksum = fnv1a(checksum, tensor.data(), sizeof(double) * static_cast<size_t>(tensor.size()));
        }
        write_pod(os, checksum);
        if (!os) throw IoError("checkpoint: write to '" + tmp + "' failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("checkpoint: cannot move '" + tmp + "' into place");
    }
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("checkpoint: '" + path + "' is not a checkpoint file");
    }
    CheckpointData data;
    read_pod(is, data.version, "version");
    if (data.version != 1) {
        throw IoError("checkpoint: unsupported version " + std::to_string(data.version));
    }
    read_pod(is, data.config_hash, "config hash");
    data.stage = read_string(is, "stage name");
    read_pod(is, data.step_count, "step count");
    uint32_t count = 0;
    read_pod(is, count, "section count");
    uint64_t checksum = 1469598103934665603ULL;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = read_string(is, "section name");
        uint32_t rank = 0;
        read_pod(is, rank, "section rank");
        if (rank > 8) throw IoError("checkpoint: implausible rank");
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) read_pod(is, shape[d], "section shape");
        int64_t numel = shape_numel(shape);
        if (numel < 0 || numel > (int64_t(1) << 32)) throw IoError("checkpoint: implausible section size");
        std::vector<double> values(static_cast<size_t>(numel));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(sizeof(double) * values.size()));
        if (!is) throw IoError("checkpoint: truncated payload in section '" + name + "'");
        checksum = fnv1a(checksum, name.data(), name.size());
        checksum = fnv1a(checksum, values.data(), sizeof(double) * values.size());
        data.sections.emplace_back(name, Tensor(std::move(shape), std::move(values)));
    }
    uint64_t stored = 0;
    read_pod(is, stored, "checksum");
    if (stored != checksum) throw IoError("checkpoint: payload checksum mismatch (corrupted file)");
    return data;
}

CheckpointData checkpoint_from_model(const DitModel& model, const std::string& stage, int64_t step_count,
                                     uint64_t config_hash_value) {
    CheckpointData data;
    data.stage = stage;
    data.step_count = step_count;
    data.config_hash = config_hash_value;
    const DitConfig& c = model.config();
    data.add_scalar("meta.depth", static_cast<double>(c.depth));
    data.add_scalar("meta.width", static_cast<double>(c.width));
    data.add_scalar("meta.heads", static_cast<double>(c.heads));
    data.add_scalar("meta.tokens", static_cast<double>(c.tokens));
    data.add_scalar("meta.categories", static_cast<double>(c.categories));
    data.add_scalar("meta.tempo_buckets", static_cast<double>(c.tempo_buckets));
    data.add_scalar("meta.mlp_mult", static_cast<double>(c.mlp_mult));
    data.add_scalar("meta.budget_path", c.budget_path ? 1.0 : 0.0);
    const auto& names = model.param_names();
    auto params = model.params();
    for (size_t i = 0; i < names.size(); ++i) {
        data.add("param." + names[i], params[i].value());
    }
    return data;
}

DitConfig dit_config_from_checkpoint(const CheckpointData& data) {
    DitConfig c;
    c.depth = static_cast<int64_t>(data.scalar("meta.depth"));
    c.width = static_cast<int64_t>(data.scalar("meta.width"));
    c.heads = static_cast<int64_t>(data.scalar("meta.heads"));
    c.tokens = static_cast<int64_t>(data.scalar("meta.tokens"));
    c.categories = static_cast<int64_t>(data.scalar("meta.categories"));
    c.tempo_buckets = static_cast<int64_t>(data.scalar("meta.tempo_buckets"));
    c.mlp_mult = static_cast<int64_t>(data.scalar("meta.mlp_mult"));
    c.budget_path = data.scalar("meta.budget_path") != 0.0;
    return c;
}

DitModel model_from_checkpoint(const CheckpointData& data) {
    DitModel model(dit_config_from_checkpoint(data), 0);
    load_model_params(model, data);
    return model;
}

void load_model_params(DitModel& model, const CheckpointData& data) {
    const auto& names = model.param_names();
    auto params = model.params_mut();
    for (size_t i = 0; i < names.size(); ++i) {
        const Tensor* stored = data.find("param." + names[i]);
        if (!stored) throw IoError("checkpoint: missing parameter section '" + names[i] + "'");
        if (!same_shape(stored->shape(), params[i].value().shape())) {
            throw IoError("checkpoint: parameter '" + names[i] + "' has shape " + shape_str(stored->shape()) +
                          ", expected " + shape_str(params[i].value().shape()));
        }
        params[i].value_mut() = *stored;
    }
}

}  // namespace edmd
