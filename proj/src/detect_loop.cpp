#include "traypipe/detect_loop.hpp"

#include "traypipe/errors.hpp"
#include "traypipe/geometry.hpp"

#include <cctype>
#include <fstream>

#include <json.hpp>

namespace traypipe {

void DetectionConfig::validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(box_threshold) || !in_unit(text_threshold) || !in_unit(dedup_iou_threshold)) {
        throw ConfigError("detection thresholds must lie in [0,1]");
    }
    if (max_iterations < 1) {
        throw ConfigError("max_iterations must be >= 1");
    }
    if (text_prompt.empty() || verify_prompt.empty()) {
        throw ConfigError("detection prompts must be non-empty");
    }
}

std::string verdict_name(Verdict v) {
    switch (v) {
    case Verdict::VerifiedClear: return "VERIFIED_CLEAR";
    case Verdict::FlaggedResidual: return "FLAGGED_RESIDUAL";
    case Verdict::FlaggedUnparseable: return "FLAGGED_UNPARSEABLE";
    case Verdict::FlaggedMaxIterations: return "FLAGGED_MAX_ITERATIONS";
    }
    throw InputError("unknown verdict");
}

Verdict verdict_from_name(const std::string& name) {
    if (name == "VERIFIED_CLEAR") return Verdict::VerifiedClear;
    if (name == "FLAGGED_RESIDUAL") return Verdict::FlaggedResidual;
    if (name == "FLAGGED_UNPARSEABLE") return Verdict::FlaggedUnparseable;
    if (name == "FLAGGED_MAX_ITERATIONS") return Verdict::FlaggedMaxIterations;
    throw ConfigError("unknown verdict name: " + name);
}

YesNo parse_verdict(const std::string& answer) {
    std::string last;
    std::string cur;
    for (char raw : answer) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isalpha(c)) {
            cur += static_cast<char>(std::toupper(c));
        } else if (!cur.empty()) {
            last = std::move(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) {
        last = std::move(cur);
    }
    if (last == "YES") {
        return YesNo::Yes;
    }
    if (last == "NO") {
        return YesNo::No;
    }
    return YesNo::Unparseable;
}

cv::Mat apply_white_masks(const cv::Mat& image_rgb, const std::vector<BBox>& boxes, Rgb fill) {
    if (image_rgb.empty() || image_rgb.type() != CV_8UC3) {
        throw InputError("apply_white_masks expects a non-empty 8-bit RGB image");
    }
    for (const auto& b : boxes) {
        if (!box_within(b, image_rgb.cols, image_rgb.rows)) {
            require_valid(b);
            throw InputError("box exceeds image bounds");
        }
    }
    cv::Mat out = image_rgb.clone();
    for (const auto& b : boxes) {
        const PixelRect r = round_outward(b);
        out(cv::Rect(r.x, r.y, r.width(), r.height()))
            .setTo(cv::Scalar(fill.r, fill.g, fill.b));
    }
    return out;
}

std::vector<Detection> filter_candidates(const std::vector<Candidate>& candidates,
                                         const DetectionConfig& config, int iteration) {
    std::vector<Detection> kept;
    for (const auto& c : candidates) {
        if (c.box_score >= config.box_threshold && c.text_score >= config.text_threshold) {
            kept.push_back(Detection{c.box, c.box_score, c.text_score, iteration});
        }
    }
    return kept;
}

std::vector<Detection> dedup_against(const std::vector<Detection>& existing,
                                     const std::vector<Detection>& fresh, double iou_threshold) {
    std::vector<Detection> kept;
    for (const auto& d : fresh) {
        bool overlaps = false;
        for (const auto& e : existing) {
            if (box_iou(e.box, d.box) > iou_threshold) {
                overlaps = true;
                break;
            }
        }
        if (!overlaps) {
            kept.push_back(d);
        }
    }
    return kept;
}

DetectionOutcome run_iterative_detection(const cv::Mat& image_rgb, DetectorBackend& detector,
                                         VerifierBackend& verifier,
                                         const DetectionConfig& config) {
    config.validate();
    if (image_rgb.empty() || image_rgb.type() != CV_8UC3) {
        throw InputError("run_iterative_detection expects a non-empty 8-bit RGB image");
    }

    DetectionOutcome out;
    cv::Mat work = image_rgb.clone();
    bool clean_stop = false;

    for (int round = 0; round < config.max_iterations; ++round) {
        const auto candidates = detector.detect(work, config.text_prompt);
        const auto kept =
            dedup_against(out.detections, filter_candidates(candidates, config, round),
                          config.dedup_iou_threshold);
        out.iterations_used = round + 1;
        if (kept.empty()) {
            clean_stop = true;
            break;
        }
        std::vector<BBox> boxes;
        boxes.reserve(kept.size());
        for (const auto& d : kept) {
            boxes.push_back(d.box);
        }
        work = apply_white_masks(work, boxes, config.mask_fill);
        out.detections.insert(out.detections.end(), kept.begin(), kept.end());
    }

    out.raw_verifier_answer = verifier.ask(work, config.verify_prompt);
    if (!clean_stop) {
        out.verdict = Verdict::FlaggedMaxIterations;
    } else {
        switch (parse_verdict(out.raw_verifier_answer)) {
        case YesNo::No: out.verdict = Verdict::VerifiedClear; break;
        case YesNo::Yes: out.verdict = Verdict::FlaggedResidual; break;
        case YesNo::Unparseable: out.verdict = Verdict::FlaggedUnparseable; break;
        }
    }
    return out;
}

void write_detections_json(const std::filesystem::path& path, const std::string& tray_id,
                           const DetectionOutcome& outcome) {
    nlohmann::ordered_json j;
    j["tray_id"] = tray_id;
    auto& dets = j["detections"] = nlohmann::ordered_json::array();
    for (const auto& d : outcome.detections) {
        dets.push_back({{"x_min", d.box.x_min},
                        {"y_min", d.box.y_min},
                        {"x_max", d.box.x_max},
                        {"y_max", d.box.y_max},
                        {"box_score", d.box_score},
                        {"text_score", d.text_score},
                        {"iteration", d.iteration}});
    }
    j["iterations_used"] = outcome.iterations_used;
    j["verdict"] = verdict_name(outcome.verdict);
    j["raw_verifier_answer"] = outcome.raw_verifier_answer;

    const auto parent = path.parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write detections file: " + path.string());
    }
    out << j.dump(2) << "\n";
}

DetectionOutcome read_detections_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open detections file: " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("detections file is not valid JSON: " + path.string());
    }
    DetectionOutcome out;
    for (const auto& d : j.at("detections")) {
        Detection det;
        det.box.x_min = d.at("x_min").get<double>();
        det.box.y_min = d.at("y_min").get<double>();
        det.box.x_max = d.at("x_max").get<double>();
        det.box.y_max = d.at("y_max").get<double>();
        det.box_score = d.at("box_score").get<double>();
        det.text_score = d.at("text_score").get<double>();
        det.iteration = d.at("iteration").get<int>();
        out.detections.push_back(det);
    }
    out.iterations_used = j.at("iterations_used").get<int>();
    out.verdict = verdict_from_name(j.at("verdict").get<std::string>());
    out.raw_verifier_answer = j.at("raw_verifier_answer").get<std::string>();
    return out;
}

} // namespace traypipe
