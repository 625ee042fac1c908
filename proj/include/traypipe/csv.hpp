#pragma once

#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace traypipe {

/// Header plus data rows. Every row has exactly header.size() fields.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

/// Quotes the field if it contains a comma, quote, or line break.
std::string csv_escape(const std::string& field);

/// One serialized CSV record, newline-terminated.
std::string csv_line(const std::vector<std::string>& fields);

/// Quote-aware parse: embedded commas, doubled quotes, and line breaks
/// inside quoted fields all round-trip. CRLF input is accepted.
/// Rows with a column count different from the header's -> ConfigError.
CsvTable parse_csv(std::istream& in);

CsvTable read_csv_file(const std::filesystem::path& path);
void write_csv_file(const std::filesystem::path& path, const CsvTable& table);

} // namespace traypipe
