#include "traypipe/csv.hpp"

#include "traypipe/errors.hpp"

#include <fstream>
#include <sstream>

namespace traypipe {

namespace {

std::vector<std::vector<std::string>> parse_records(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> fields;
    std::string cur;
    bool in_quotes = false;
    bool field_started = false;

    auto end_field = [&] {
        fields.push_back(cur);
        cur.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        records.push_back(std::move(fields));
        fields.clear();
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                cur += c;
            }
            continue;
        }
        switch (c) {
        case '"':
            in_quotes = true;
            field_started = true;
            break;
        case ',':
            end_field();
            field_started = true; // the next field exists even if empty
            break;
        case '\r':
            if (i + 1 < text.size() && text[i + 1] == '\n') {
                break; // handled by the '\n'
            }
            [[fallthrough]];
        case '\n':
            if (field_started || !cur.empty() || !fields.empty()) {
                end_record(); // blank lines produce no record
            }
            break;
        default:
            cur += c;
            field_started = true;
            break;
        }
    }
    if (in_quotes) {
        throw ConfigError("unterminated quote in CSV input");
    }
    if (field_started || !cur.empty() || !fields.empty()) {
        end_record();
    }
    return records;
}

} // namespace

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) {
        return field;
    }
    std::string out;
    out.reserve(field.size() + 2);
    out += '"';
    for (char c : field) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) {
            out += ',';
        }
        out += csv_escape(fields[i]);
    }
    out += '\n';
    return out;
}

CsvTable parse_csv(std::istream& in) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto records = parse_records(text);
    if (records.empty()) {
        throw ConfigError("empty CSV input");
    }
    CsvTable table;
    table.header = std::move(records.front());
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].size() != table.header.size()) {
            throw ConfigError("CSV row " + std::to_string(i) + " has " +
                              std::to_string(records[i].size()) + " fields, header has " +
                              std::to_string(table.header.size()));
        }
        table.rows.push_back(std::move(records[i]));
    }
    return table;
}

CsvTable read_csv_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open CSV file: " + path.string());
    }
    try {
        return parse_csv(in);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_csv_file(const std::filesystem::path& path, const CsvTable& table) {
    for (const auto& row : table.rows) {
        if (row.size() != table.header.size()) {
            throw InputError("CSV row width does not match header");
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write CSV file: " + path.string());
    }
    out << csv_line(table.header);
    for (const auto& row : table.rows) {
        out << csv_line(row);
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

} // namespace traypipe
