#pragma once

#include "traypipe/backends.hpp"
#include "traypipe/crop_sort.hpp"
#include "traypipe/detect_loop.hpp"
#include "traypipe/eval.hpp"
#include "traypipe/manifest.hpp"
#include "traypipe/segment_post.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace traypipe {

/// Name of the environment variable that, when set, anchors relative
/// input paths in a config file (hermetic test mode).
extern const char* const kFixtureRootEnv;

/// One pipeline invocation's settings, loaded from a JSON config file.
/// Relative input paths resolve against $TRAYPIPE_FIXTURE_ROOT when set,
/// else against the config file's directory; output_dir resolves against
/// the working directory. run_id is a stable hash of the config file
/// bytes, so a manifest remembers which configuration produced it.
struct PipelineConfig {
    std::filesystem::path input_dir;
    std::string image_glob = "*.png";
    std::filesystem::path metadata_csv; // master CSV keyed by a tray_id column
    std::filesystem::path metadata_dir; // per-tray {tray_id}.csv files
    std::filesystem::path ground_truth_csv;
    std::filesystem::path output_dir;
    int workers = 1;
    bool has_backends = false;
    BackendSpec detector;
    BackendSpec verifier;
    BackendSpec segmenter;
    DetectionConfig detection;
    SortConfig sort;
    SegmentationConfig segmentation;
    std::string run_id;

    /// Parses and validates; unknown keys are ConfigErrors, referenced
    /// input paths must exist.
    static PipelineConfig load(const std::filesystem::path& config_path);

    Taxonomy taxonomy() const { return Taxonomy::named(segmentation.taxonomy_name); }
};

/// A tray image found in the input directory; the id is the filename stem.
struct TrayFile {
    std::string tray_id;
    std::string image_filename;
};

/// Non-recursive listing of input_dir filtered by the config's image glob
/// and the caller's tray-id glob, sorted by tray id.
std::vector<TrayFile> discover_trays(const PipelineConfig& config, const std::string& tray_glob);

/// Shell-style glob match (*, ?, character classes) against a name.
bool glob_match(const std::string& pattern, const std::string& name);

enum class StageKind { Detect, Crop, Segment };
std::string stage_kind_name(StageKind kind);

struct StageRequest {
    std::string tray_glob = "*";
    bool resume = false; // skip trays whose stage is already done/flagged
};

struct StageSummary {
    std::string stage;
    int selected = 0;
    int done = 0;
    int flagged = 0;
    int failed = 0;
    int skipped_resume = 0; // already complete, left untouched
    int skipped_prereq = 0; // previous stage missing, nothing written
    std::vector<std::string> messages; // human-readable per-tray notes

    /// Trays whose output is usable after this invocation.
    int succeeded() const { return done + flagged + skipped_resume; }
};

/// Runs one stage over the selected trays: worker threads process trays
/// independently, a single writer merges results into the manifest and
/// rewrites it atomically after every tray. Also regenerates the
/// flagged-trays summary file.
StageSummary run_stage(const PipelineConfig& config, StageKind kind, const StageRequest& request);

/// detect, then crop, then segment; stages never overlap.
std::vector<StageSummary> run_all_stages(const PipelineConfig& config,
                                         const StageRequest& request);

/// Count evaluation. Either counts_csv (columns tray_id, detected_count,
/// ground_truth_count) or manifest_path + ground_truth_csv (columns
/// tray_id, ground_truth_count). Reports are written to report_dir as
/// counts.json and counts.txt.
struct CountsEvalRequest {
    std::filesystem::path counts_csv;
    std::filesystem::path manifest_path;
    std::filesystem::path ground_truth_csv;
    std::filesystem::path report_dir;
};
CountReport evaluate_counts(const CountsEvalRequest& request);

/// Segmentation evaluation over two directories of mask files matched by
/// filename. Reports land in report_dir as segmentation.json/.txt.
struct SegEvalRequest {
    std::filesystem::path pred_dir;
    std::filesystem::path gt_dir;
    std::string taxonomy_name = "beetle5";
    bool absent_as_one = false;
    std::filesystem::path report_dir;
};
SegReport evaluate_segmentation(const SegEvalRequest& request);

/// One line per flagged or failed stage across the manifest, sorted by
/// tray id; written to <output>/flagged.txt by every stage run.
std::vector<std::string> flagged_summary_lines(const RunManifest& manifest);

} // namespace traypipe
