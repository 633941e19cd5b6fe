#ifndef EBLMM_IO_HPP
#define EBLMM_IO_HPP

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "eblmm/error.hpp"

namespace eblmm {

/// CSV file held as strings: a header and rows of equal width.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t k = 0; k < header.size(); ++k) {
            if (header[k] == name) return static_cast<int>(k);
        }
        throw ValidationError("missing column '" + name + "'", name);
    }

    bool has_column(const std::string& name) const {
        for (const auto& h : header) {
            if (h == name) return true;
        }
        return false;
    }

    std::vector<double> numeric(const std::string& name) const;
    std::vector<std::string> strings(const std::string& name) const;
};

namespace detail {

/// Splits one CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_record(const std::string& line, int line_no) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    bool was_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += ch;
            }
        } else if (ch == '"' && field.empty() && !was_quoted) {
            quoted = true;
            was_quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(field));
            field.clear();
            was_quoted = false;
        } else {
            field += ch;
        }
    }
    if (quoted) throw ValidationError("unterminated quote on line " + std::to_string(line_no), "csv");
    out.push_back(std::move(field));
    return out;
}

inline double parse_double(const std::string& text, const std::string& column, std::size_t row) {
    std::size_t begin = 0;
    std::size_t end = text.size();
    while (begin < end && (text[begin] == ' ' || text[begin] == '\t')) ++begin;
    while (end > begin && (text[end - 1] == ' ' || text[end - 1] == '\t')) --end;
    if (begin < end && text[begin] == '+') ++begin;
    double v = 0.0;
    const auto res = std::from_chars(text.data() + begin, text.data() + end, v);
    if (begin == end) {
        throw ValidationError("missing value in column '" + column + "' on data row " + std::to_string(row + 1),
                              column);
    }
    if (res.ec != std::errc() || res.ptr != text.data() + end || !std::isfinite(v)) {
        throw ValidationError("non-numeric or non-finite value '" + text + "' in column '" + column +
                                  "' on data row " + std::to_string(row + 1),
                              column);
    }
    return v;
}

} // namespace detail

inline std::vector<double> CsvTable::numeric(const std::string& name) const {
    const int k = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(detail::parse_double(rows[i][k], name, i));
    return out;
}

inline std::vector<std::string> CsvTable::strings(const std::string& name) const {
    const int k = column(name);
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i][k].empty()) {
            throw ValidationError("missing value in column '" + name + "' on data row " + std::to_string(i + 1),
                                  name);
        }
        out.push_back(rows[i][k]);
    }
    return out;
}

/// Reads a UTF-8 CSV with a header row. Lines starting with '#' and blank
/// lines are skipped.
inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open data file '" + path + "'", path);
    CsvTable table;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (line.empty() || line[0] == '#') continue;
        auto fields = detail::split_record(line, line_no);
        if (!have_header) {
            table.header = std::move(fields);
            have_header = true;
            std::map<std::string, int> seen;
            for (const auto& h : table.header) {
                if (h.empty()) throw ValidationError("empty column name in header of '" + path + "'", path);
                if (seen[h]++) throw ValidationError("duplicate column '" + h + "' in '" + path + "'", h);
            }
            continue;
        }
        if (fields.size() != table.header.size()) {
            throw ValidationError("line " + std::to_string(line_no) + " of '" + path + "' has " +
                                      std::to_string(fields.size()) + " fields, header has " +
                                      std::to_string(table.header.size()),
                                  path);
        }
        table.rows.push_back(std::move(fields));
    }
    if (!have_header) throw ValidationError("data file '" + path + "' has no header", path);
    return table;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out << contents;
        out.flush();
        if (!out) throw Error("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

} // namespace eblmm

#endif // EBLMM_IO_HPP
