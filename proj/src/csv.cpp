#include "calcquant/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "calcquant/error.hpp"

namespace calcquant::csv {

std::size_t Table::column(std::string_view name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c] == name) return c;
    fail(ErrorCode::format, "csv: missing column '" + std::string(name) + "'");
}

bool Table::has_column(std::string_view name) const noexcept {
    for (const auto& h : header)
        if (h == name) return true;
    return false;
}

Table parse(std::string_view text) {
    Table t;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    std::size_t line = 1;
    auto end_row = [&] {
        row.push_back(std::move(field));
        field.clear();
        const bool blank = row.size() == 1 && row[0].empty() && !any;
        if (!blank) {
            if (t.header.empty()) {
                t.header = std::move(row);
            } else {
                require(row.size() == t.header.size(), ErrorCode::format,
                        "csv: line " + std::to_string(line) + " has " + std::to_string(row.size()) +
                            " fields, header has " + std::to_string(t.header.size()));
                t.rows.push_back(std::move(row));
            }
        }
        row.clear();
        any = false;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        switch (c) {
        case '"':
            quoted = true;
            any = true;
            break;
        case ',':
            row.push_back(std::move(field));
            field.clear();
            any = true;
            break;
        case '\r':
            break;
        case '\n':
            end_row();
            ++line;
            break;
        default:
            field += c;
        }
    }
    require(!quoted, ErrorCode::format, "csv: unterminated quoted field");
    if (!field.empty() || !row.empty() || any) end_row();
    require(!t.header.empty(), ErrorCode::format, "csv: missing header");
    return t;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Table read_file(const std::filesystem::path& path) { return parse(read_text_file(path)); }

std::string escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string join_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += escape(fields[i]);
    }
    return out + '\n';
}

std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

} // namespace

double parse_double(std::string_view s, std::string_view what) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(!s.empty() && r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorCode::format,
            "invalid number for " + std::string(what) + ": '" + std::string(s) + "'");
    return v;
}

long long parse_integer(std::string_view s, std::string_view what) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    long long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(!s.empty() && r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorCode::format,
            "invalid integer for " + std::string(what) + ": '" + std::string(s) + "'");
    return v;
}

bool parse_flag(std::string_view s, std::string_view what) {
    s = trim(s);
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    fail(ErrorCode::format, "invalid flag for " + std::string(what) + ": '" + std::string(s) + "'");
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::io, "cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) fail(ErrorCode::io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorCode::io, "cannot replace " + path.string());
    }
}

} // namespace calcquant::csv
