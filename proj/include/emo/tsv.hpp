#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emo/error.hpp"

namespace emo {

// Shortest round-trip formatting for doubles. Every number that crosses a
// file boundary goes through this, so staged (file-based) and in-process
// pipeline runs see bit-identical values.
inline std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw InvalidInput("not a number: '" + s + "'");
    return v;
}

inline long parse_long(const std::string& s) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw InvalidInput("not an integer: '" + s + "'");
    return v;
}

inline std::vector<std::string> split_tsv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return out;
}

// Reads a TSV with a header row. Returns header + rows; validates rectangular shape.
struct TsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int col(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw InvalidInput("missing TSV column '" + name + "'");
    }
};

inline TsvTable read_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    TsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_tsv_line(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
        } else {
            if (fields.size() != t.header.size())
                throw InvalidInput(path.string() + ": ragged row with " +
                                   std::to_string(fields.size()) + " fields");
            t.rows.push_back(std::move(fields));
        }
    }
    if (first) throw InvalidInput(path.string() + ": empty TSV");
    return t;
}

class TsvWriter {
public:
    TsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path, std::ios::binary), path_(path.string()) {
        if (!out_) throw RuntimeFailure("cannot write " + path_);
        write_row(header);
    }

    void write_row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << '\t';
            out_ << fields[i];
        }
        out_ << '\n';
        if (!out_) throw RuntimeFailure("write failed: " + path_);
    }

private:
    std::ofstream out_;
    std::string path_;
};

} // namespace emo
