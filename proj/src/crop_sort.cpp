#include "traypipe/crop_sort.hpp"

#include "traypipe/csv.hpp"
#include "traypipe/errors.hpp"
#include "traypipe/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <numeric>

namespace traypipe {

void SortConfig::validate() const {
    if (!(row_tolerance_factor > 0.0)) {
        throw ConfigError("row_tolerance_factor must be > 0");
    }
    if (crop_padding < 0) {
        throw ConfigError("crop_padding must be >= 0");
    }
}

std::vector<std::size_t> sort_reading_order(const std::vector<BBox>& boxes,
                                            const SortConfig& config) {
    config.validate();
    const std::size_t n = boxes.size();
    if (n == 0) {
        return {};
    }
    for (const auto& b : boxes) {
        require_valid(b);
    }

    std::vector<double> heights(n);
    for (std::size_t i = 0; i < n; ++i) {
        heights[i] = boxes[i].height();
    }
    std::sort(heights.begin(), heights.end());
    const double median_height =
        (n % 2 == 1) ? heights[n / 2] : 0.5 * (heights[n / 2 - 1] + heights[n / 2]);
    const double tolerance = config.row_tolerance_factor * median_height;

    std::vector<std::size_t> by_y(n);
    std::iota(by_y.begin(), by_y.end(), std::size_t{0});
    std::stable_sort(by_y.begin(), by_y.end(), [&](std::size_t a, std::size_t b) {
        return boxes[a].y_min < boxes[b].y_min;
    });

    std::vector<std::vector<std::size_t>> rows;
    double row_reference_y = 0.0;
    for (std::size_t idx : by_y) {
        if (rows.empty() || boxes[idx].y_min - row_reference_y > tolerance) {
            rows.emplace_back();
            row_reference_y = boxes[idx].y_min;
        }
        rows.back().push_back(idx);
    }

    std::vector<std::size_t> order;
    order.reserve(n);
    for (auto& row : rows) {
        std::sort(row.begin(), row.end(), [&](std::size_t a, std::size_t b) {
            return std::tuple(boxes[a].x_min, boxes[a].y_min, a) <
                   std::tuple(boxes[b].x_min, boxes[b].y_min, b);
        });
        order.insert(order.end(), row.begin(), row.end());
    }
    return order;
}

std::vector<cv::Mat> crop_boxes(const cv::Mat& image_rgb, const std::vector<BBox>& boxes,
                                const std::vector<std::size_t>& ordering, int padding) {
    if (image_rgb.empty() || image_rgb.type() != CV_8UC3) {
        throw InputError("crop_boxes expects a non-empty 8-bit RGB image");
    }
    if (padding < 0) {
        throw InputError("padding must be >= 0");
    }
    if (ordering.size() != boxes.size()) {
        throw InputError("ordering is not a permutation: wrong length");
    }
    std::vector<bool> seen(boxes.size(), false);
    for (std::size_t idx : ordering) {
        if (idx >= boxes.size() || seen[idx]) {
            throw InputError("ordering is not a permutation of the box indices");
        }
        seen[idx] = true;
    }
    for (const auto& b : boxes) {
        if (!box_within(b, image_rgb.cols, image_rgb.rows)) {
            require_valid(b);
            throw InputError("box exceeds image bounds");
        }
    }

    std::vector<cv::Mat> crops;
    crops.reserve(ordering.size());
    for (std::size_t idx : ordering) {
        const PixelRect r =
            expand_and_clamp(round_outward(boxes[idx]), padding, image_rgb.cols, image_rgb.rows);
        crops.push_back(image_rgb(cv::Rect(r.x, r.y, r.width(), r.height())).clone());
    }
    return crops;
}

std::vector<std::pair<std::size_t, MetadataRecord>> match_metadata(std::size_t ordered_count,
                                                                   const TrayRecord& tray) {
    validate_tray_record(tray);
    if (tray.metadata_rows.size() != ordered_count) {
        throw MetadataMismatch(ordered_count, tray.metadata_rows.size());
    }
    std::vector<std::pair<std::size_t, MetadataRecord>> matches;
    matches.reserve(ordered_count);
    for (std::size_t i = 0; i < ordered_count; ++i) {
        matches.emplace_back(i, tray.metadata_rows[i]);
    }
    return matches;
}

std::string crop_filename(const std::string& tray_id, std::size_t reading_index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "_%03zu.png", reading_index);
    return tray_id + buf;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_tray_csv(const std::string& tray_id,
                    const std::vector<Detection>& ordered_detections,
                    const std::vector<std::string>& crop_filenames,
                    const std::vector<MetadataRecord>* metadata,
                    const std::filesystem::path& out_path) {
    if (ordered_detections.size() != crop_filenames.size()) {
        throw InputError("detections and crop filenames disagree in length");
    }
    if (metadata && !metadata->empty() && metadata->size() != ordered_detections.size()) {
        throw InputError("metadata rows and detections disagree in length");
    }

    CsvTable table;
    table.header = {"tray_id", "crop_index", "crop_filename", "x_min",
                    "y_min",   "x_max",      "y_max",         "box_score"};
    const bool with_metadata = metadata && !metadata->empty();
    if (with_metadata) {
        for (const auto& row : *metadata) {
            if (row.fields.size() != metadata->front().fields.size()) {
                throw InputError("metadata rows have differing column counts");
            }
        }
        for (const auto& [key, value] : metadata->front().fields) {
            (void)value;
            table.header.push_back(key);
        }
    }

    for (std::size_t i = 0; i < ordered_detections.size(); ++i) {
        const auto& d = ordered_detections[i];
        std::vector<std::string> row = {tray_id,
                                        std::to_string(i),
                                        crop_filenames[i],
                                        format_double(d.box.x_min),
                                        format_double(d.box.y_min),
                                        format_double(d.box.x_max),
                                        format_double(d.box.y_max),
                                        format_double(d.box_score)};
        if (with_metadata) {
            for (const auto& [key, value] : (*metadata)[i].fields) {
                (void)key;
                row.push_back(value);
            }
        }
        table.rows.push_back(std::move(row));
    }

    const auto parent = out_path.parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    write_csv_file(out_path, table);
}

void append_csv_column(const std::filesystem::path& csv_path, const std::string& column_name,
                       const std::vector<std::string>& values) {
    CsvTable table = read_csv_file(csv_path);
    if (table.rows.size() != values.size()) {
        throw InputError("column has " + std::to_string(values.size()) + " values, CSV has " +
                         std::to_string(table.rows.size()) + " rows");
    }
    const bool replace = !table.header.empty() && table.header.back() == column_name;
    if (replace) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            table.rows[i].back() = values[i];
        }
    } else {
        table.header.push_back(column_name);
        for (std::size_t i = 0; i < values.size(); ++i) {
            table.rows[i].push_back(values[i]);
        }
    }
    write_csv_file(csv_path, table);
}

} // namespace traypipe
