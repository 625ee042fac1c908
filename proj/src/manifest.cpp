#include "traypipe/manifest.hpp"

#include "traypipe/errors.hpp"

#include <fstream>

namespace traypipe {

namespace {

using nlohmann::ordered_json;

void check_stage(const std::string& tray_id, const char* stage, StageStatus status,
                 const std::string& reason) {
    const bool needs_reason = status == StageStatus::Flagged || status == StageStatus::Failed;
    if (needs_reason && reason.empty()) {
        throw InputError("tray " + tray_id + ": " + stage + " stage is " +
                         status_name(status) + " without a reason");
    }
    if (!needs_reason && !reason.empty()) {
        throw InputError("tray " + tray_id + ": " + stage + " stage is " +
                         status_name(status) + " but carries a reason");
    }
}

ordered_json detect_json(const DetectStage& s) {
    ordered_json j;
    j["status"] = status_name(s.status);
    if (!s.reason.empty()) {
        j["reason"] = s.reason;
    }
    if (stage_complete(s.status)) {
        j["detections_path"] = s.detections_path;
        j["detection_count"] = s.detection_count;
        j["iterations_used"] = s.iterations_used;
        j["verdict"] = s.verdict;
        j["raw_answer"] = s.raw_answer;
    }
    return j;
}

ordered_json crop_json(const CropStage& s) {
    ordered_json j;
    j["status"] = status_name(s.status);
    if (!s.reason.empty()) {
        j["reason"] = s.reason;
    }
    if (stage_complete(s.status)) {
        j["csv_path"] = s.csv_path;
        j["crops"] = s.crop_paths;
        j["metadata_matched"] = s.metadata_matched;
    }
    return j;
}

ordered_json segment_json(const SegmentStage& s) {
    ordered_json j;
    j["status"] = status_name(s.status);
    if (!s.reason.empty()) {
        j["reason"] = s.reason;
    }
    if (stage_complete(s.status)) {
        j["masks"] = s.mask_paths;
        j["overlays"] = s.overlay_paths;
    }
    return j;
}

template <typename Stage>
void stage_common_from_json(const nlohmann::json& j, Stage& s) {
    s.status = status_from_name(j.at("status").get<std::string>());
    s.reason = j.value("reason", std::string());
}

} // namespace

std::string status_name(StageStatus status) {
    switch (status) {
    case StageStatus::Pending: return "pending";
    case StageStatus::Done: return "done";
    case StageStatus::Flagged: return "flagged";
    case StageStatus::Failed: return "failed";
    }
    throw InputError("unknown stage status");
}

StageStatus status_from_name(const std::string& name) {
    if (name == "pending") return StageStatus::Pending;
    if (name == "done") return StageStatus::Done;
    if (name == "flagged") return StageStatus::Flagged;
    if (name == "failed") return StageStatus::Failed;
    throw ConfigError("unknown stage status \"" + name + "\"");
}

bool stage_complete(StageStatus status) {
    return status == StageStatus::Done || status == StageStatus::Flagged;
}

void RunManifest::validate() const {
    for (const auto& [tray_id, entry] : trays) {
        if (tray_id.empty()) {
            throw InputError("manifest has a tray with an empty id");
        }
        check_stage(tray_id, "detect", entry.detect.status, entry.detect.reason);
        check_stage(tray_id, "crop", entry.crop.status, entry.crop.reason);
        check_stage(tray_id, "segment", entry.segment.status, entry.segment.reason);
        if (entry.crop.status != StageStatus::Pending && !stage_complete(entry.detect.status)) {
            throw InputError("tray " + tray_id + ": crop stage ran before detection completed");
        }
        if (entry.segment.status != StageStatus::Pending && !stage_complete(entry.crop.status)) {
            throw InputError("tray " + tray_id + ": segment stage ran before cropping completed");
        }
        if (entry.segment.status != StageStatus::Pending &&
            (entry.segment.mask_paths.size() != entry.crop.crop_paths.size() ||
             entry.segment.overlay_paths.size() != entry.crop.crop_paths.size()) &&
            stage_complete(entry.segment.status)) {
            throw InputError("tray " + tray_id + ": segment outputs not aligned with crops");
        }
    }
}

nlohmann::ordered_json RunManifest::to_json() const {
    ordered_json j;
    j["run_id"] = run_id;
    ordered_json trays_json = ordered_json::object();
    for (const auto& [tray_id, entry] : trays) {
        ordered_json t;
        t["image_path"] = entry.image_path;
        t["detect"] = detect_json(entry.detect);
        t["crop"] = crop_json(entry.crop);
        t["segment"] = segment_json(entry.segment);
        trays_json[tray_id] = std::move(t);
    }
    j["trays"] = std::move(trays_json);
    return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
        m.run_id = j.at("run_id").get<std::string>();
        for (const auto& [tray_id, t] : j.at("trays").items()) {
            TrayEntry entry;
            entry.image_path = t.at("image_path").get<std::string>();

            const auto& d = t.at("detect");
            stage_common_from_json(d, entry.detect);
            if (stage_complete(entry.detect.status)) {
                entry.detect.detections_path = d.at("detections_path").get<std::string>();
                entry.detect.detection_count = d.at("detection_count").get<int>();
                entry.detect.iterations_used = d.at("iterations_used").get<int>();
                entry.detect.verdict = d.at("verdict").get<std::string>();
                entry.detect.raw_answer = d.at("raw_answer").get<std::string>();
            }

            const auto& c = t.at("crop");
            stage_common_from_json(c, entry.crop);
            if (stage_complete(entry.crop.status)) {
                entry.crop.csv_path = c.at("csv_path").get<std::string>();
                entry.crop.crop_paths = c.at("crops").get<std::vector<std::string>>();
                entry.crop.metadata_matched = c.at("metadata_matched").get<bool>();
            }

            const auto& s = t.at("segment");
            stage_common_from_json(s, entry.segment);
            if (stage_complete(entry.segment.status)) {
                entry.segment.mask_paths = s.at("masks").get<std::vector<std::string>>();
                entry.segment.overlay_paths = s.at("overlays").get<std::vector<std::string>>();
            }

            m.trays.emplace(tray_id, std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed manifest: ") + e.what());
    }
    m.validate();
    return m;
}

RunManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read manifest " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    return RunManifest::from_json(j);
}

void save_manifest_atomic(const RunManifest& manifest, const std::filesystem::path& path) {
    manifest.validate();
    std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out << manifest.to_json().dump(2) << "\n";
        out.flush();
        if (!out) {
            throw IoError("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

} // namespace traypipe
