#pragma once

#include "traypipe/backends.hpp"
#include "traypipe/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace traypipe {

struct DetectionConfig {
    std::string text_prompt = "a beetle.";
    double box_threshold = 0.3;
    double text_threshold = 0.2;
    int max_iterations = 20;
    double dedup_iou_threshold = 0.5;
    Rgb mask_fill{255, 255, 255};
    std::string verify_prompt = "Do you see beetles in this image?";

    void validate() const; // thresholds in [0,1], max_iterations >= 1
};

enum class Verdict {
    VerifiedClear,       // verifier parsed NO, iteration cap not hit
    FlaggedResidual,     // verifier parsed YES: something may remain, check manually
    FlaggedUnparseable,  // verifier answer had no final YES/NO token
    FlaggedMaxIterations // loop never reached an empty round
};

std::string verdict_name(Verdict v); // e.g. "VERIFIED_CLEAR"
Verdict verdict_from_name(const std::string& name);

struct DetectionOutcome {
    std::vector<Detection> detections; // discovery order
    int iterations_used = 0;           // detector calls made
    Verdict verdict = Verdict::FlaggedUnparseable;
    std::string raw_verifier_answer;
};

enum class YesNo { Yes, No, Unparseable };

/// Takes the final alphabetic token of the answer, case-insensitively.
YesNo parse_verdict(const std::string& answer);

/// Returns a copy of the image with every pixel inside any box set to
/// fill. Boxes are rounded outward; a box outside the image bounds is an
/// InputError. The input is never mutated.
cv::Mat apply_white_masks(const cv::Mat& image_rgb, const std::vector<BBox>& boxes, Rgb fill);

/// Keeps candidates with box_score >= box_threshold AND text_score >=
/// text_threshold (boundaries inclusive), preserving order, stamped with
/// the given iteration index.
std::vector<Detection> filter_candidates(const std::vector<Candidate>& candidates,
                                         const DetectionConfig& config, int iteration = 0);

/// Subset of fresh whose IoU with every existing box is <= iou_threshold,
/// order preserved. Fresh entries are not deduplicated against each other.
std::vector<Detection> dedup_against(const std::vector<Detection>& existing,
                                     const std::vector<Detection>& fresh, double iou_threshold);

/// The stage-1 loop: detect, filter, dedup, white-mask, repeat until an
/// empty round or max_iterations, then consult the verifier on the final
/// masked image.
DetectionOutcome run_iterative_detection(const cv::Mat& image_rgb, DetectorBackend& detector,
                                         VerifierBackend& verifier, const DetectionConfig& config);

/// Per-tray detection output file.
void write_detections_json(const std::filesystem::path& path, const std::string& tray_id,
                           const DetectionOutcome& outcome);
DetectionOutcome read_detections_json(const std::filesystem::path& path);

} // namespace traypipe
