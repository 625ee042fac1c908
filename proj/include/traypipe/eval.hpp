#pragma once

#include "traypipe/types.hpp"

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace traypipe {

/// One tray's detected count next to its ground truth.
struct CountRow {
    std::string tray_id;
    long long detected = 0;
    long long ground_truth = 0;

    long long delta() const { return detected - ground_truth; }
};

/// Exact-match count accuracy over a tray set. Counters are exact
/// integers; accuracy() divides only when asked, so display rounding
/// never leaks back into the report.
struct CountReport {
    long long total_trays = 0;
    long long exact_matches = 0;
    long long over_count_trays = 0;
    long long under_count_trays = 0;
    std::vector<CountRow> rows;

    double accuracy() const {
        return static_cast<double>(exact_matches) / static_cast<double>(total_trays);
    }
};

/// Classifies every tray as exact / over / under. Empty input or a
/// negative count throws InputError.
CountReport count_accuracy(const std::vector<CountRow>& trays);

/// Intersection over union of one class between two masks of equal size.
/// nullopt when the class appears in neither mask (not applicable);
/// 0.0 when it appears in exactly one. Dimension mismatch throws
/// InputError.
std::optional<double> class_iou(const LabelMask& pred, const LabelMask& gt, int class_id);

/// Per-class IoU row plus the per-image mean for one (pred, gt) pair.
struct ImageRow {
    std::string name;
    /// Indexed by class id; background entry stays nullopt.
    std::vector<std::optional<double>> per_class;
    /// Mean over applicable non-background classes; nullopt when none apply.
    std::optional<double> miou;
};

/// Scores one mask pair against a taxonomy. Background is excluded from
/// the mean. By default a class absent from both masks is excluded too;
/// with absent_as_one it scores 1.0 instead (sensitivity analysis).
/// Dimension mismatch or labels outside the taxonomy throw InputError.
ImageRow image_miou(const LabelMask& pred, const LabelMask& gt, const Taxonomy& taxonomy,
                    bool absent_as_one = false);

struct SegPair {
    std::string name;
    LabelMask pred;
    LabelMask gt;
};

/// Dataset-level segmentation report.
struct SegReport {
    std::string taxonomy_name;
    bool absent_as_one = false;
    std::vector<ImageRow> images;
    /// Mean per-class IoU over the images where the class is applicable;
    /// indexed by class id, background stays nullopt.
    std::vector<std::optional<double>> dataset_class_iou;
    /// Unweighted mean of the applicable per-image mIoU values.
    std::optional<double> dataset_miou;
};

/// Scores every pair and aggregates. Empty input throws InputError.
SegReport dataset_report(const std::vector<SegPair>& pairs, const Taxonomy& taxonomy,
                         bool absent_as_one = false);

/// 0.9781 -> "97.81%". Two decimals, half-away-from-zero, to match the
/// report tables.
std::string format_pct(double fraction);

nlohmann::ordered_json count_report_json(const CountReport& report);
nlohmann::ordered_json seg_report_json(const SegReport& report, const Taxonomy& taxonomy);

/// Aligned plain-text renderings of the same reports.
std::string count_report_text(const CountReport& report);
std::string seg_report_text(const SegReport& report, const Taxonomy& taxonomy);

} // namespace traypipe
