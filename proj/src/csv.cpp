#include "edmd/csv.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

#include "edmd/errors.hpp"

namespace edmd {

struct CsvWriter::Impl {
    std::ofstream out;
};

namespace {

std::string escape(const std::string& v) {
    bool needs_quotes = v.find_first_of(",\"\n") != std::string::npos;
    if (!needs_quotes) return v;
    std::string out = "\"";
    for (char c : v) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

CsvWriter::CsvWriter(const std::string& path, std::string schema, std::vector<std::string> columns)
    : impl_(new Impl), columns_(columns.size() + 1), schema_(std::move(schema)) {
    impl_->out.open(path, std::ios::trunc);
    if (!impl_->out) {
        delete impl_;
        throw IoError("csv: cannot open '" + path + "' for writing");
    }
    impl_->out << "schema_version";
    for (const auto& c : columns) impl_->out << ',' << escape(c);
    impl_->out << '\n';
}

CsvWriter::~CsvWriter() {
    delete impl_;
}

void CsvWriter::row(const std::vector<std::string>& values) {
    if (values.size() + 1 != columns_) {
        throw Error("csv: row has " + std::to_string(values.size()) + " values, expected " +
                    std::to_string(columns_ - 1));
    }
    impl_->out << escape(schema_);
    for (const auto& v : values) impl_->out << ',' << escape(v);
    impl_->out << '\n';
}

void CsvWriter::flush() {
    impl_->out.flush();
}

std::string CsvWriter::num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string CsvWriter::num(int64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%" PRId64, v);
    return buf;
}

}  // namespace edmd
