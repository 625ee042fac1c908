#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace traypipe {

/// Lifecycle of one stage for one tray. Flags are advisory — a flagged
/// tray carries its outputs and later stages still run; failed stops the
/// tray.
enum class StageStatus { Pending, Done, Flagged, Failed };

std::string status_name(StageStatus status);
StageStatus status_from_name(const std::string& name);

/// True for done and flagged: the stage produced usable output.
bool stage_complete(StageStatus status);

struct DetectStage {
    StageStatus status = StageStatus::Pending;
    std::string reason;
    std::string detections_path;
    int detection_count = 0;
    int iterations_used = 0;
    std::string verdict;
    std::string raw_answer;
};

struct CropStage {
    StageStatus status = StageStatus::Pending;
    std::string reason;
    std::string csv_path;
    std::vector<std::string> crop_paths;
    bool metadata_matched = false;
};

struct SegmentStage {
    StageStatus status = StageStatus::Pending;
    std::string reason;
    /// Aligned with crop_paths; an empty string marks a crop whose
    /// segmentation was skipped or failed.
    std::vector<std::string> mask_paths;
    std::vector<std::string> overlay_paths;
};

struct TrayEntry {
    std::string image_path;
    DetectStage detect;
    CropStage crop;
    SegmentStage segment;
};

/// One JSON document per run, keyed by tray id. All paths inside are
/// relative to the output root, so a moved output tree stays valid and
/// reruns are byte-comparable.
struct RunManifest {
    std::string run_id;
    std::map<std::string, TrayEntry> trays;

    /// Throws InputError when an invariant is broken: flagged/failed
    /// stages need a non-empty reason, done/pending must not carry one,
    /// and a stage may only leave pending once the previous stage is
    /// done or flagged.
    void validate() const;

    nlohmann::ordered_json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

/// Throws IoError when unreadable, ConfigError when malformed.
RunManifest load_manifest(const std::filesystem::path& path);

/// Validates, writes to a sibling temp file, then renames over the
/// target, so readers never observe a half-written manifest.
void save_manifest_atomic(const RunManifest& manifest, const std::filesystem::path& path);

} // namespace traypipe
