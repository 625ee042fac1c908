#pragma once

#include "traypipe/types.hpp"

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

namespace traypipe {

struct SortConfig {
    /// Fraction of the median box height within which a box still joins
    /// the current row.
    double row_tolerance_factor = 0.5;
    int crop_padding = 0;

    void validate() const; // factor > 0, padding >= 0
};

/// Reading order: boxes are swept by y_min; a box joins the current row
/// while |y_min - row reference y| <= factor * median box height (the
/// reference is the first member's y_min), otherwise it starts a new row.
/// Rows run top to bottom, members left to right by x_min (ties: y_min,
/// then original index). Returns a permutation of the input indices.
std::vector<std::size_t> sort_reading_order(const std::vector<BBox>& boxes,
                                            const SortConfig& config);

/// One crop per box, in `ordering` sequence. Each crop covers its box
/// rounded outward, grown by padding, clamped to the image. The source
/// image is untouched. An ordering that is not a permutation of the box
/// indices is an InputError.
std::vector<cv::Mat> crop_boxes(const cv::Mat& image_rgb, const std::vector<BBox>& boxes,
                                const std::vector<std::size_t>& ordering, int padding);

/// Positional zip of reading-order crops with the tray's metadata rows.
/// Count disagreement throws MetadataMismatch (the tray is flagged and
/// crops are still written, without metadata columns).
std::vector<std::pair<std::size_t, MetadataRecord>> match_metadata(std::size_t ordered_count,
                                                                   const TrayRecord& tray);

/// {tray_id}_{index padded to 3 digits}.png, so lexicographic file order
/// equals specimen order.
std::string crop_filename(const std::string& tray_id, std::size_t reading_index);

/// Per-tray CSV. Fixed columns: tray_id, crop_index, crop_filename, x_min,
/// y_min, x_max, y_max, box_score; metadata columns follow in their
/// original order when provided. Rows are in reading order.
void write_tray_csv(const std::string& tray_id,
                    const std::vector<Detection>& ordered_detections,
                    const std::vector<std::string>& crop_filenames,
                    const std::vector<MetadataRecord>* metadata,
                    const std::filesystem::path& out_path);

/// Adds (or replaces) a trailing column in an existing CSV file. The
/// value count must match the row count.
void append_csv_column(const std::filesystem::path& csv_path, const std::string& column_name,
                       const std::vector<std::string>& values);

/// Shortest decimal text that round-trips the value.
std::string format_double(double v);

} // namespace traypipe
