#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stil/errors.hpp"

namespace stil::data {

// Minimal RFC-4180 style reader: quoted fields, doubled quotes, CRLF tolerant.
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int64_t column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return static_cast<int64_t>(i);
        }
        return -1;
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open table " + path);
    CsvTable table;
    std::string line;
    if (!std::getline(in, line)) throw DataError("table " + path + " is empty");
    table.header = split_csv_line(line);
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != table.header.size()) {
            throw DataError("table " + path + " line " + std::to_string(lineno) + ": expected " +
                            std::to_string(table.header.size()) + " fields, got " + std::to_string(fields.size()));
        }
        table.rows.push_back(std::move(fields));
    }
    return table;
}

inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out += "\"\"";
        else out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

inline void write_csv(const std::string& path, const CsvTable& table) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write table " + path);
    auto emit = [&](const std::vector<std::string>& fields) {
        for (size_t i = 0; i < fields.size(); ++i) {
            if (i) out << ',';
            out << csv_escape(fields[i]);
        }
        out << '\n';
    };
    emit(table.header);
    for (const auto& r : table.rows) emit(r);
}

}  // namespace stil::data
