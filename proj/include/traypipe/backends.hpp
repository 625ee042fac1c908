#pragma once

#include "traypipe/types.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace traypipe {

/// Raw detector output before threshold filtering.
struct Candidate {
    BBox box;
    double box_score = 0.0;
    double text_score = 0.0;
};

/// Open-vocabulary detector: image + text prompt -> unfiltered candidates.
/// Implementations never mutate the input image. A backend instance is
/// single-consumer; concurrent trays each get their own instance.
class DetectorBackend {
public:
    virtual ~DetectorBackend() = default;
    virtual std::vector<Candidate> detect(const cv::Mat& image_rgb,
                                          const std::string& text_prompt) = 0;
};

/// Vision-language verifier: image + question -> free-form text answer.
class VerifierBackend {
public:
    virtual ~VerifierBackend() = default;
    virtual std::string ask(const cv::Mat& image_rgb, const std::string& question) = 0;
};

/// Semantic segmenter: image at model resolution -> label mask of the
/// same resolution.
class SegmenterBackend {
public:
    virtual ~SegmenterBackend() = default;
    virtual LabelMask segment(const cv::Mat& image_rgb, const Taxonomy& taxonomy) = 0;
};

// ---------------------------------------------------------------------------
// Scripted backends: deterministic canned-response replays for hermetic runs.
// The k-th call returns the k-th scripted entry. Calls beyond the script
// return an empty candidate list (detector) or repeat the final entry
// (verifier, segmenter).
// ---------------------------------------------------------------------------

class ScriptedDetector final : public DetectorBackend {
public:
    explicit ScriptedDetector(std::shared_ptr<const std::vector<std::vector<Candidate>>> rounds);
    std::vector<Candidate> detect(const cv::Mat& image_rgb, const std::string& text_prompt) override;
    std::size_t calls() const { return next_; }

private:
    std::shared_ptr<const std::vector<std::vector<Candidate>>> rounds_;
    std::size_t next_ = 0;
};

class ScriptedVerifier final : public VerifierBackend {
public:
    explicit ScriptedVerifier(std::shared_ptr<const std::vector<std::string>> answers);
    std::string ask(const cv::Mat& image_rgb, const std::string& question) override;
    std::size_t calls() const { return next_; }

private:
    std::shared_ptr<const std::vector<std::string>> answers_;
    std::size_t next_ = 0;
};

class ScriptedSegmenter final : public SegmenterBackend {
public:
    ScriptedSegmenter(std::shared_ptr<const std::vector<LabelMask>> masks, std::string taxonomy_name);
    LabelMask segment(const cv::Mat& image_rgb, const Taxonomy& taxonomy) override;
    std::size_t calls() const { return next_; }

private:
    std::shared_ptr<const std::vector<LabelMask>> masks_;
    std::string taxonomy_name_;
    std::size_t next_ = 0;
};

// Fixture files. Detector: {"rounds": [[{x_min,y_min,x_max,y_max,box_score,
// text_score}, ...], ...]}. Verifier: {"answers": ["...", ...]}. Segmenter:
// {"taxonomy": "beetle5", "masks": ["relative/path.png", ...]} with mask
// paths resolved against the script file's directory. Malformed fixtures
// throw ConfigError.
std::shared_ptr<const std::vector<std::vector<Candidate>>>
load_detector_script(const std::filesystem::path& path);

std::shared_ptr<const std::vector<std::string>>
load_verifier_script(const std::filesystem::path& path);

std::shared_ptr<const std::vector<LabelMask>>
load_segmenter_script(const std::filesystem::path& path, const Taxonomy& taxonomy);

// ---------------------------------------------------------------------------
// Backend selection. kind is "scripted" or "reference"; scripted backends
// replay a fixture file, reference backends call an HTTP model service
// (see README for the wire format and the expected checkpoints).
// ---------------------------------------------------------------------------

struct BackendSpec {
    std::string kind;     // "scripted" | "reference"
    std::string script;   // fixture path, scripted only (already resolved);
                          // may contain "{tray_id}" for per-tray fixtures
    std::string endpoint; // base URL, reference only
};

/// Every "{tray_id}" in the path replaced by the tray id.
std::string resolve_tray_template(const std::string& path, const std::string& tray_id);

/// Builds fresh single-consumer backend instances per tray. Scripted
/// fixtures are loaded once per file (thread-safe cache) and shared; each
/// make() starts a new replay.
class BackendSet {
public:
    static BackendSet from_specs(const BackendSpec& detector, const BackendSpec& verifier,
                                 const BackendSpec& segmenter, const Taxonomy& taxonomy);

    std::unique_ptr<DetectorBackend> make_detector(const std::string& tray_id) const;
    std::unique_ptr<VerifierBackend> make_verifier(const std::string& tray_id) const;
    std::unique_ptr<SegmenterBackend> make_segmenter(const std::string& tray_id) const;

private:
    struct Cache;

    BackendSpec detector_spec_;
    BackendSpec verifier_spec_;
    BackendSpec segmenter_spec_;
    std::string taxonomy_name_;
    std::shared_ptr<Cache> cache_;
};

} // namespace traypipe
