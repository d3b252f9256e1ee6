#pragma once

#include <string>
#include <vector>

namespace edmd {

// Minimal CSV emitter. The first column of every file is the schema tag so a
// reader can detect format changes; the header row names it explicitly.
class CsvWriter {
  public:
    CsvWriter(const std::string& path, std::string schema, std::vector<std::string> columns);
    ~CsvWriter();
    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    void row(const std::vector<std::string>& values);
    void flush();

    static std::string num(double v);     // shortest round-trip formatting
    static std::string num(int64_t v);

  private:
    struct Impl;
    Impl* impl_;
    size_t columns_;
    std::string schema_;
};

}  // namespace edmd
