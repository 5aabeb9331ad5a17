#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace calcquant::csv {

/// Header plus data rows. Fields may be double-quoted; embedded quotes are
/// doubled. Blank lines are skipped.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index by name; throws a format error when absent.
    [[nodiscard]] std::size_t column(std::string_view name) const;
    [[nodiscard]] bool has_column(std::string_view name) const noexcept;
};

[[nodiscard]] Table parse(std::string_view text);
[[nodiscard]] Table read_file(const std::filesystem::path& path);

[[nodiscard]] std::string escape(std::string_view field);
[[nodiscard]] std::string join_row(const std::vector<std::string>& fields);

/// Shortest round-trip decimal form.
[[nodiscard]] std::string format_number(double v);

/// Strict numeric field parsers; `what` names the field in error messages.
[[nodiscard]] double parse_double(std::string_view s, std::string_view what);
[[nodiscard]] long long parse_integer(std::string_view s, std::string_view what);
[[nodiscard]] bool parse_flag(std::string_view s, std::string_view what);

/// Writes through a temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
[[nodiscard]] std::string read_text_file(const std::filesystem::path& path);

} // namespace calcquant::csv
