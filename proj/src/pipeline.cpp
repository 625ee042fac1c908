#include "traypipe/pipeline.hpp"

#include "traypipe/csv.hpp"
#include "traypipe/errors.hpp"
#include "traypipe/image_io.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <fnmatch.h>

namespace traypipe {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kFixtureRootEnv = "TRAYPIPE_FIXTURE_ROOT";

namespace {

// --- config parsing ---------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
        }
    }
}

Rgb parse_rgb(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) {
        throw ConfigError(where + " must be an [r, g, b] array");
    }
    Rgb c;
    std::uint8_t* channels[3] = {&c.r, &c.g, &c.b};
    for (int i = 0; i < 3; ++i) {
        if (!j[i].is_number_integer()) {
            throw ConfigError(where + " channels must be integers");
        }
        const auto v = j[i].get<long long>();
        if (v < 0 || v > 255) {
            throw ConfigError(where + " channels must lie in [0,255]");
        }
        *channels[i] = static_cast<std::uint8_t>(v);
    }
    return c;
}

DetectionConfig parse_detection(const json& j) {
    check_keys(j,
               {"text_prompt", "box_threshold", "text_threshold", "max_iterations",
                "dedup_iou_threshold", "mask_fill", "verify_prompt"},
               "detection");
    DetectionConfig c;
    c.text_prompt = j.value("text_prompt", c.text_prompt);
    c.box_threshold = j.value("box_threshold", c.box_threshold);
    c.text_threshold = j.value("text_threshold", c.text_threshold);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.dedup_iou_threshold = j.value("dedup_iou_threshold", c.dedup_iou_threshold);
    if (j.contains("mask_fill")) {
        c.mask_fill = parse_rgb(j.at("mask_fill"), "detection.mask_fill");
    }
    c.verify_prompt = j.value("verify_prompt", c.verify_prompt);
    return c;
}

SortConfig parse_sort(const json& j) {
    check_keys(j, {"row_tolerance_factor", "crop_padding"}, "sort");
    SortConfig c;
    c.row_tolerance_factor = j.value("row_tolerance_factor", c.row_tolerance_factor);
    c.crop_padding = j.value("crop_padding", c.crop_padding);
    return c;
}

SegmentationConfig parse_segmentation(const json& j) {
    check_keys(j,
               {"taxonomy", "model_width", "model_height", "overlay_alpha", "required_classes",
                "palette"},
               "segmentation");
    SegmentationConfig c;
    c.taxonomy_name = j.value("taxonomy", c.taxonomy_name);
    c.model_width = j.value("model_width", c.model_width);
    c.model_height = j.value("model_height", c.model_height);
    c.overlay_alpha = j.value("overlay_alpha", c.overlay_alpha);
    if (j.contains("required_classes")) {
        c.required_classes = j.at("required_classes").get<std::vector<std::string>>();
    }
    if (j.contains("palette")) {
        const Taxonomy taxonomy = Taxonomy::named(c.taxonomy_name);
        Palette pal = default_palette(taxonomy);
        for (auto it = j.at("palette").begin(); it != j.at("palette").end(); ++it) {
            const auto id = taxonomy.id_of(it.key());
            if (!id) {
                throw ConfigError("segmentation.palette names unknown class \"" + it.key() +
                                  "\"");
            }
            pal[static_cast<std::size_t>(*id)] =
                parse_rgb(it.value(), "segmentation.palette." + it.key());
        }
        c.palette = std::move(pal);
    }
    return c;
}

BackendSpec parse_backend(const json& j, const std::string& role, const fs::path& base) {
    check_keys(j, {"kind", "script", "endpoint"}, "backends." + role);
    BackendSpec spec;
    spec.kind = j.value("kind", std::string());
    spec.endpoint = j.value("endpoint", std::string());
    if (j.contains("script")) {
        fs::path script = j.at("script").get<std::string>();
        if (script.is_relative()) {
            script = base / script;
        }
        spec.script = script.generic_string();
    }
    return spec;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// The directory prefix of a templated script path that contains no
// placeholder, so existence can be checked up front.
fs::path template_fixed_dir(const std::string& templated) {
    const auto brace = templated.find('{');
    const auto slash = templated.rfind('/', brace);
    if (slash == std::string::npos) {
        return {};
    }
    return fs::path(templated.substr(0, slash));
}

void check_script_exists(const BackendSpec& spec, const std::string& role) {
    if (spec.kind != "scripted" || spec.script.empty()) {
        return;
    }
    if (spec.script.find("{tray_id}") != std::string::npos) {
        const fs::path dir = template_fixed_dir(spec.script);
        if (!dir.empty() && !fs::is_directory(dir)) {
            throw ConfigError("backends." + role + ": script directory not found: " +
                              dir.string());
        }
        return;
    }
    if (!fs::is_regular_file(spec.script)) {
        throw ConfigError("backends." + role + ": script not found: " + spec.script);
    }
}

long long parse_count(const std::string& text, const std::string& where) {
    long long value = 0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) {
        throw ConfigError(where + ": \"" + text + "\" is not an integer");
    }
    return value;
}

std::size_t column_index(const CsvTable& table, const std::string& name, const fs::path& path) {
    const auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) {
        throw ConfigError(path.string() + " has no \"" + name + "\" column");
    }
    return static_cast<std::size_t>(it - table.header.begin());
}

// --- metadata sources -------------------------------------------------------

std::vector<MetadataRecord> records_from_table(const CsvTable& table,
                                               std::optional<std::size_t> drop_column) {
    std::vector<MetadataRecord> records;
    for (const auto& row : table.rows) {
        MetadataRecord rec;
        for (std::size_t c = 0; c < table.header.size(); ++c) {
            if (drop_column && c == *drop_column) {
                continue;
            }
            rec.fields.emplace_back(table.header[c], row[c]);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

class MetadataSource {
public:
    explicit MetadataSource(const PipelineConfig& config) {
        if (!config.metadata_csv.empty()) {
            configured_ = true;
            const CsvTable table = read_csv_file(config.metadata_csv);
            const std::size_t key = column_index(table, "tray_id", config.metadata_csv);
            for (const auto& row : table.rows) {
                CsvTable one;
                one.header = table.header;
                one.rows.push_back(row);
                auto recs = records_from_table(one, key);
                auto& bucket = by_tray_[row[key]];
                bucket.push_back(std::move(recs.front()));
            }
        } else if (!config.metadata_dir.empty()) {
            configured_ = true;
            dir_ = config.metadata_dir;
        }
    }

    std::optional<std::vector<MetadataRecord>> rows_for(const std::string& tray_id) const {
        if (!configured_) {
            return std::nullopt;
        }
        if (!dir_.empty()) {
            const fs::path file = dir_ / (tray_id + ".csv");
            if (!fs::is_regular_file(file)) {
                return std::nullopt;
            }
            return records_from_table(read_csv_file(file), std::nullopt);
        }
        const auto it = by_tray_.find(tray_id);
        if (it == by_tray_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

private:
    bool configured_ = false;
    fs::path dir_;
    std::map<std::string, std::vector<MetadataRecord>> by_tray_;
};

// --- worker pool ------------------------------------------------------------

struct TrayResult {
    std::string tray_id;
    TrayEntry entry;
};

void run_pool(std::size_t count, int workers,
              const std::function<TrayResult(std::size_t)>& work,
              const std::function<void(TrayResult&&)>& commit) {
    if (count == 0) {
        return;
    }
    const int n = std::max(1, std::min(workers, static_cast<int>(count)));
    std::mutex mu;
    std::condition_variable cv;
    std::deque<TrayResult> ready;
    std::atomic<std::size_t> next{0};

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) {
                    return;
                }
                TrayResult r = work(i);
                {
                    std::lock_guard<std::mutex> lock(mu);
                    ready.push_back(std::move(r));
                }
                cv.notify_one();
            }
        });
    }
    // Single-writer loop: only this thread touches the manifest.
    for (std::size_t committed = 0; committed < count; ++committed) {
        std::unique_lock<std::mutex> lock(mu);
        cv.wait(lock, [&] { return !ready.empty(); });
        TrayResult r = std::move(ready.front());
        ready.pop_front();
        lock.unlock();
        commit(std::move(r));
    }
    for (auto& th : threads) {
        th.join();
    }
}

// --- per-tray stage work ----------------------------------------------------

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) {
            out += sep;
        }
        out += parts[i];
    }
    return out;
}

TrayEntry work_detect(const PipelineConfig& config, const BackendSet& backends,
                      const TrayFile& tray, TrayEntry entry) {
    entry.image_path = tray.image_filename;
    DetectStage stage;
    try {
        const cv::Mat image = load_image_rgb(config.input_dir / tray.image_filename);
        auto detector = backends.make_detector(tray.tray_id);
        auto verifier = backends.make_verifier(tray.tray_id);
        const DetectionOutcome outcome =
            run_iterative_detection(image, *detector, *verifier, config.detection);

        const std::string rel = "detections/" + tray.tray_id + ".json";
        write_detections_json(config.output_dir / rel, tray.tray_id, outcome);

        stage.detections_path = rel;
        stage.detection_count = static_cast<int>(outcome.detections.size());
        stage.iterations_used = outcome.iterations_used;
        stage.verdict = verdict_name(outcome.verdict);
        stage.raw_answer = outcome.raw_verifier_answer;
        switch (outcome.verdict) {
        case Verdict::VerifiedClear:
            stage.status = StageStatus::Done;
            break;
        case Verdict::FlaggedResidual:
            stage.status = StageStatus::Flagged;
            stage.reason =
                "verifier reports residual beetles: \"" + outcome.raw_verifier_answer + "\"";
            break;
        case Verdict::FlaggedUnparseable:
            stage.status = StageStatus::Flagged;
            stage.reason = "verifier answer has no final YES/NO: \"" +
                           outcome.raw_verifier_answer + "\"";
            break;
        case Verdict::FlaggedMaxIterations:
            stage.status = StageStatus::Flagged;
            stage.reason = "iteration cap reached after " +
                           std::to_string(outcome.iterations_used) + " rounds";
            break;
        }
    } catch (const std::exception& e) {
        stage = DetectStage{};
        stage.status = StageStatus::Failed;
        stage.reason = e.what();
    }
    entry.detect = stage;
    // Later stages are stale once detection reruns.
    entry.crop = CropStage{};
    entry.segment = SegmentStage{};
    return entry;
}

TrayEntry work_crop(const PipelineConfig& config, const MetadataSource& metadata,
                    const TrayFile& tray, TrayEntry entry) {
    CropStage stage;
    try {
        const DetectionOutcome outcome =
            read_detections_json(config.output_dir / entry.detect.detections_path);
        std::vector<BBox> boxes;
        boxes.reserve(outcome.detections.size());
        for (const auto& d : outcome.detections) {
            boxes.push_back(d.box);
        }
        const auto order = sort_reading_order(boxes, config.sort);
        const cv::Mat image = load_image_rgb(config.input_dir / entry.image_path);
        const auto crops = crop_boxes(image, boxes, order, config.sort.crop_padding);

        std::vector<Detection> ordered;
        ordered.reserve(order.size());
        for (const std::size_t i : order) {
            ordered.push_back(outcome.detections[i]);
        }

        const std::string tray_dir = "crops/" + tray.tray_id;
        std::vector<std::string> filenames;
        for (std::size_t k = 0; k < crops.size(); ++k) {
            const std::string name = crop_filename(tray.tray_id, k);
            save_image_rgb(config.output_dir / tray_dir / name, crops[k]);
            stage.crop_paths.push_back(tray_dir + "/" + name);
            filenames.push_back(name);
        }

        const std::vector<MetadataRecord>* matched = nullptr;
        const auto rows = metadata.rows_for(tray.tray_id);
        if (rows && !rows->empty()) {
            TrayRecord record;
            record.tray_id = tray.tray_id;
            record.image_path = entry.image_path;
            record.metadata_rows = *rows;
            try {
                match_metadata(crops.size(), record);
                matched = &*rows;
                stage.metadata_matched = true;
            } catch (const MetadataMismatch& m) {
                stage.reason = m.what();
            }
        }

        const std::string rel_csv = tray_dir + "/" + tray.tray_id + ".csv";
        write_tray_csv(tray.tray_id, ordered, filenames, matched, config.output_dir / rel_csv);
        stage.csv_path = rel_csv;
        stage.status = stage.reason.empty() ? StageStatus::Done : StageStatus::Flagged;
    } catch (const std::exception& e) {
        stage = CropStage{};
        stage.status = StageStatus::Failed;
        stage.reason = e.what();
    }
    entry.crop = stage;
    entry.segment = SegmentStage{};
    return entry;
}

TrayEntry work_segment(const PipelineConfig& config, const BackendSet& backends,
                       const TrayFile& tray, TrayEntry entry) {
    SegmentStage stage;
    try {
        const Taxonomy taxonomy = config.taxonomy();
        const Palette palette = config.segmentation.effective_palette(taxonomy);
        auto segmenter = backends.make_segmenter(tray.tray_id);
        const std::string seg_dir = "segmentation/" + tray.tray_id;

        std::vector<std::string> missing_column;
        std::vector<std::string> problems;
        for (std::size_t k = 0; k < entry.crop.crop_paths.size(); ++k) {
            const std::string& rel_crop = entry.crop.crop_paths[k];
            try {
                const cv::Mat crop = load_image_rgb(config.output_dir / rel_crop);
                const LabelMask mask =
                    segment_crop(crop, *segmenter, taxonomy, config.segmentation);
                const std::string stem = fs::path(rel_crop).stem().string();
                const std::string mask_rel = seg_dir + "/" + stem + "_mask.png";
                const std::string overlay_rel = seg_dir + "/" + stem + "_overlay.png";
                write_mask_png(config.output_dir / mask_rel, mask, palette);
                save_image_rgb(
                    config.output_dir / overlay_rel,
                    overlay_mask(crop, mask, palette, config.segmentation.overlay_alpha));
                stage.mask_paths.push_back(mask_rel);
                stage.overlay_paths.push_back(overlay_rel);

                const auto missing = completeness_check(mask, taxonomy, config.segmentation);
                missing_column.push_back(join(missing, ";"));
                if (!missing.empty()) {
                    problems.push_back("crop " + std::to_string(k) + " missing " +
                                       join(missing, ";"));
                }
            } catch (const std::exception& e) {
                stage.mask_paths.emplace_back();
                stage.overlay_paths.emplace_back();
                missing_column.emplace_back();
                problems.push_back("crop " + std::to_string(k) + ": " + e.what());
            }
        }
        if (!entry.crop.csv_path.empty()) {
            append_csv_column(config.output_dir / entry.crop.csv_path, "missing_parts",
                              missing_column);
        }
        if (problems.empty()) {
            stage.status = StageStatus::Done;
        } else {
            stage.status = StageStatus::Flagged;
            stage.reason = join(problems, "; ");
        }
    } catch (const std::exception& e) {
        stage = SegmentStage{};
        stage.status = StageStatus::Failed;
        stage.reason = e.what();
    }
    entry.segment = stage;
    return entry;
}

StageStatus stage_status(const TrayEntry& entry, StageKind kind) {
    switch (kind) {
    case StageKind::Detect: return entry.detect.status;
    case StageKind::Crop: return entry.crop.status;
    case StageKind::Segment: return entry.segment.status;
    }
    throw InputError("unknown stage kind");
}

void write_text_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << content;
    out.flush();
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

} // namespace

// --- config -----------------------------------------------------------------

PipelineConfig PipelineConfig::load(const fs::path& config_path) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config file " + config_path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    const std::string bytes = buffer.str();

    json j = json::parse(bytes, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw ConfigError("config file is not a JSON object: " + config_path.string());
    }
    check_keys(j,
               {"input_dir", "image_glob", "metadata_csv", "metadata_dir", "ground_truth_csv",
                "output_dir", "workers", "backends", "detection", "sort", "segmentation"},
               "config");

    fs::path base = config_path.parent_path();
    if (const char* root = std::getenv(kFixtureRootEnv); root != nullptr && *root != '\0') {
        base = root;
    }
    auto resolve = [&](const std::string& value) -> fs::path {
        fs::path p = value;
        return p.is_absolute() ? p : base / p;
    };

    PipelineConfig config;
    config.run_id = hex64(fnv1a64(bytes));
    if (j.contains("input_dir")) {
        config.input_dir = resolve(j.at("input_dir").get<std::string>());
    }
    config.image_glob = j.value("image_glob", config.image_glob);
    if (j.contains("metadata_csv")) {
        config.metadata_csv = resolve(j.at("metadata_csv").get<std::string>());
    }
    if (j.contains("metadata_dir")) {
        config.metadata_dir = resolve(j.at("metadata_dir").get<std::string>());
    }
    if (j.contains("ground_truth_csv")) {
        config.ground_truth_csv = resolve(j.at("ground_truth_csv").get<std::string>());
    }
    if (j.contains("output_dir")) {
        config.output_dir = j.at("output_dir").get<std::string>();
    }
    config.workers = j.value("workers", config.workers);
    if (config.workers < 1) {
        throw ConfigError("workers must be >= 1");
    }

    if (j.contains("backends")) {
        const auto& b = j.at("backends");
        check_keys(b, {"detector", "verifier", "segmenter"}, "backends");
        for (const char* role : {"detector", "verifier", "segmenter"}) {
            if (!b.contains(role)) {
                throw ConfigError("backends section is missing \"" + std::string(role) + "\"");
            }
        }
        config.has_backends = true;
        config.detector = parse_backend(b.at("detector"), "detector", base);
        config.verifier = parse_backend(b.at("verifier"), "verifier", base);
        config.segmenter = parse_backend(b.at("segmenter"), "segmenter", base);
    }
    if (j.contains("detection")) {
        config.detection = parse_detection(j.at("detection"));
    }
    if (j.contains("sort")) {
        config.sort = parse_sort(j.at("sort"));
    }
    if (j.contains("segmentation")) {
        config.segmentation = parse_segmentation(j.at("segmentation"));
    }

    // Value validation.
    config.detection.validate();
    config.sort.validate();
    const Taxonomy taxonomy = Taxonomy::named(config.segmentation.taxonomy_name);
    config.segmentation.validate(taxonomy);

    // Referenced inputs must exist now, not at tray time.
    if (!config.input_dir.empty() && !fs::is_directory(config.input_dir)) {
        throw ConfigError("input_dir not found: " + config.input_dir.string());
    }
    if (!config.metadata_csv.empty() && !config.metadata_dir.empty()) {
        throw ConfigError("config sets both metadata_csv and metadata_dir; pick one");
    }
    if (!config.metadata_csv.empty() && !fs::is_regular_file(config.metadata_csv)) {
        throw ConfigError("metadata_csv not found: " + config.metadata_csv.string());
    }
    if (!config.metadata_dir.empty() && !fs::is_directory(config.metadata_dir)) {
        throw ConfigError("metadata_dir not found: " + config.metadata_dir.string());
    }
    if (!config.ground_truth_csv.empty() && !fs::is_regular_file(config.ground_truth_csv)) {
        throw ConfigError("ground_truth_csv not found: " + config.ground_truth_csv.string());
    }
    if (config.has_backends) {
        check_script_exists(config.detector, "detector");
        check_script_exists(config.verifier, "verifier");
        check_script_exists(config.segmenter, "segmenter");
    }
    return config;
}

// --- tray discovery ---------------------------------------------------------

bool glob_match(const std::string& pattern, const std::string& name) {
    return fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

std::vector<TrayFile> discover_trays(const PipelineConfig& config, const std::string& tray_glob) {
    if (config.input_dir.empty()) {
        throw ConfigError("config has no input_dir");
    }
    std::vector<TrayFile> trays;
    for (const auto& e : fs::directory_iterator(config.input_dir)) {
        if (!e.is_regular_file()) {
            continue;
        }
        const std::string filename = e.path().filename().string();
        if (!glob_match(config.image_glob, filename)) {
            continue;
        }
        const std::string tray_id = e.path().stem().string();
        if (!glob_match(tray_glob, tray_id)) {
            continue;
        }
        trays.push_back({tray_id, filename});
    }
    std::sort(trays.begin(), trays.end(),
              [](const TrayFile& a, const TrayFile& b) { return a.tray_id < b.tray_id; });
    for (std::size_t i = 1; i < trays.size(); ++i) {
        if (trays[i].tray_id == trays[i - 1].tray_id) {
            throw ConfigError("duplicate tray id \"" + trays[i].tray_id + "\" (" +
                              trays[i - 1].image_filename + " and " + trays[i].image_filename +
                              ")");
        }
    }
    return trays;
}

std::string stage_kind_name(StageKind kind) {
    switch (kind) {
    case StageKind::Detect: return "detect";
    case StageKind::Crop: return "crop";
    case StageKind::Segment: return "segment";
    }
    throw InputError("unknown stage kind");
}

// --- stage driver -----------------------------------------------------------

StageSummary run_stage(const PipelineConfig& config, StageKind kind,
                       const StageRequest& request) {
    StageSummary summary;
    summary.stage = stage_kind_name(kind);

    if (config.output_dir.empty()) {
        throw ConfigError("no output directory (config output_dir or --output)");
    }
    const auto trays = discover_trays(config, request.tray_glob);
    if (trays.empty()) {
        throw ConfigError("no tray images match \"" + request.tray_glob + "\" in " +
                          config.input_dir.string());
    }
    summary.selected = static_cast<int>(trays.size());

    const fs::path manifest_path = config.output_dir / "manifest.json";
    RunManifest manifest;
    if (fs::exists(manifest_path)) {
        manifest = load_manifest(manifest_path);
        if (manifest.run_id != config.run_id) {
            throw ConfigError("manifest in " + config.output_dir.string() +
                              " came from a different configuration; use a fresh output "
                              "directory or the original config file");
        }
    } else {
        manifest.run_id = config.run_id;
    }

    std::optional<BackendSet> backends;
    if (kind == StageKind::Detect || kind == StageKind::Segment) {
        if (!config.has_backends) {
            throw ConfigError("config has no backends section");
        }
        backends =
            BackendSet::from_specs(config.detector, config.verifier, config.segmenter,
                                   config.taxonomy());
    }
    std::optional<MetadataSource> metadata;
    if (kind == StageKind::Crop) {
        metadata.emplace(config);
    }

    struct Item {
        TrayFile tray;
        TrayEntry existing;
    };
    std::vector<Item> items;
    for (const auto& tray : trays) {
        TrayEntry existing;
        if (const auto it = manifest.trays.find(tray.tray_id); it != manifest.trays.end()) {
            existing = it->second;
        }
        if (existing.image_path.empty()) {
            existing.image_path = tray.image_filename;
        }
        if (request.resume && stage_complete(stage_status(existing, kind))) {
            ++summary.skipped_resume;
            continue;
        }
        if (kind == StageKind::Crop && !stage_complete(existing.detect.status)) {
            ++summary.skipped_prereq;
            summary.messages.push_back("tray " + tray.tray_id +
                                       " skipped: detection has not completed");
            continue;
        }
        if (kind == StageKind::Segment && !stage_complete(existing.crop.status)) {
            ++summary.skipped_prereq;
            summary.messages.push_back("tray " + tray.tray_id +
                                       " skipped: cropping has not completed");
            continue;
        }
        items.push_back({tray, std::move(existing)});
    }

    const auto work = [&](std::size_t i) -> TrayResult {
        const Item& item = items[i];
        TrayEntry entry;
        try {
            switch (kind) {
            case StageKind::Detect:
                entry = work_detect(config, *backends, item.tray, item.existing);
                break;
            case StageKind::Crop:
                entry = work_crop(config, *metadata, item.tray, item.existing);
                break;
            case StageKind::Segment:
                entry = work_segment(config, *backends, item.tray, item.existing);
                break;
            }
        } catch (const std::exception& e) {
            // Stage workers catch their own errors; this guards the glue.
            entry = item.existing;
            auto& slot = kind == StageKind::Detect  ? entry.detect.status
                         : kind == StageKind::Crop  ? entry.crop.status
                                                    : entry.segment.status;
            slot = StageStatus::Failed;
            (kind == StageKind::Detect  ? entry.detect.reason
             : kind == StageKind::Crop  ? entry.crop.reason
                                        : entry.segment.reason) = e.what();
        }
        return {item.tray.tray_id, std::move(entry)};
    };
    const auto commit = [&](TrayResult&& result) {
        const StageStatus status = stage_status(result.entry, kind);
        switch (status) {
        case StageStatus::Done:
            ++summary.done;
            break;
        case StageStatus::Flagged:
            ++summary.flagged;
            break;
        case StageStatus::Failed:
            ++summary.failed;
            break;
        case StageStatus::Pending:
            break;
        }
        if (status == StageStatus::Flagged || status == StageStatus::Failed) {
            const auto& reason = kind == StageKind::Detect  ? result.entry.detect.reason
                                 : kind == StageKind::Crop  ? result.entry.crop.reason
                                                            : result.entry.segment.reason;
            summary.messages.push_back("tray " + result.tray_id + " [" + summary.stage + "] " +
                                       status_name(status) + ": " + reason);
        }
        manifest.trays[result.tray_id] = std::move(result.entry);
        save_manifest_atomic(manifest, manifest_path);
    };
    run_pool(items.size(), config.workers, work, commit);

    save_manifest_atomic(manifest, manifest_path);
    const auto lines = flagged_summary_lines(manifest);
    std::string flagged_text;
    for (const auto& line : lines) {
        flagged_text += line;
        flagged_text += "\n";
    }
    write_text_file(config.output_dir / "flagged.txt", flagged_text);
    return summary;
}

std::vector<StageSummary> run_all_stages(const PipelineConfig& config,
                                         const StageRequest& request) {
    std::vector<StageSummary> summaries;
    summaries.push_back(run_stage(config, StageKind::Detect, request));
    summaries.push_back(run_stage(config, StageKind::Crop, request));
    summaries.push_back(run_stage(config, StageKind::Segment, request));
    return summaries;
}

std::vector<std::string> flagged_summary_lines(const RunManifest& manifest) {
    std::vector<std::string> lines;
    for (const auto& [tray_id, entry] : manifest.trays) {
        const std::pair<const char*, const StageStatus> stages[] = {
            {"detect", entry.detect.status},
            {"crop", entry.crop.status},
            {"segment", entry.segment.status},
        };
        const std::string* reasons[] = {&entry.detect.reason, &entry.crop.reason,
                                        &entry.segment.reason};
        for (std::size_t i = 0; i < 3; ++i) {
            const StageStatus status = stages[i].second;
            if (status == StageStatus::Flagged || status == StageStatus::Failed) {
                lines.push_back("tray " + tray_id + " [" + stages[i].first + "] " +
                                status_name(status) + ": " + *reasons[i]);
            }
        }
    }
    return lines;
}

// --- evaluation -------------------------------------------------------------

CountReport evaluate_counts(const CountsEvalRequest& request) {
    std::vector<CountRow> rows;
    if (!request.counts_csv.empty()) {
        const CsvTable table = read_csv_file(request.counts_csv);
        const std::size_t id_col = column_index(table, "tray_id", request.counts_csv);
        const std::size_t det_col = column_index(table, "detected_count", request.counts_csv);
        const std::size_t gt_col = column_index(table, "ground_truth_count", request.counts_csv);
        for (const auto& row : table.rows) {
            CountRow r;
            r.tray_id = row[id_col];
            r.detected = parse_count(row[det_col], "detected_count for tray " + r.tray_id);
            r.ground_truth =
                parse_count(row[gt_col], "ground_truth_count for tray " + r.tray_id);
            rows.push_back(std::move(r));
        }
    } else {
        if (request.manifest_path.empty() || request.ground_truth_csv.empty()) {
            throw ConfigError(
                "counts evaluation needs either a counts CSV or a manifest plus a "
                "ground-truth CSV");
        }
        if (!fs::is_regular_file(request.ground_truth_csv)) {
            throw InputError("ground-truth file not found: " +
                             request.ground_truth_csv.string());
        }
        const RunManifest manifest = load_manifest(request.manifest_path);
        const CsvTable table = read_csv_file(request.ground_truth_csv);
        const std::size_t id_col = column_index(table, "tray_id", request.ground_truth_csv);
        const std::size_t gt_col =
            column_index(table, "ground_truth_count", request.ground_truth_csv);
        std::map<std::string, long long> ground_truth;
        for (const auto& row : table.rows) {
            ground_truth[row[id_col]] =
                parse_count(row[gt_col], "ground_truth_count for tray " + row[id_col]);
        }
        for (const auto& [tray_id, entry] : manifest.trays) {
            if (!stage_complete(entry.detect.status)) {
                continue;
            }
            const auto it = ground_truth.find(tray_id);
            if (it == ground_truth.end()) {
                throw InputError("no ground-truth count for tray " + tray_id + " in " +
                                 request.ground_truth_csv.string());
            }
            rows.push_back({tray_id, entry.detect.detection_count, it->second});
        }
    }

    const CountReport report = count_accuracy(rows);
    if (!request.report_dir.empty()) {
        write_text_file(request.report_dir / "counts.json",
                        count_report_json(report).dump(2) + "\n");
        write_text_file(request.report_dir / "counts.txt", count_report_text(report));
    }
    return report;
}

SegReport evaluate_segmentation(const SegEvalRequest& request) {
    const Taxonomy taxonomy = Taxonomy::named(request.taxonomy_name);
    if (!fs::is_directory(request.pred_dir)) {
        throw InputError("prediction mask directory not found: " + request.pred_dir.string());
    }
    if (!fs::is_directory(request.gt_dir)) {
        throw InputError("ground-truth mask directory not found: " + request.gt_dir.string());
    }
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(request.pred_dir)) {
        if (e.is_regular_file() && glob_match("*.png", e.path().filename().string())) {
            names.push_back(e.path().filename().string());
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) {
        throw InputError("no mask files in " + request.pred_dir.string());
    }

    std::vector<SegPair> pairs;
    for (const auto& name : names) {
        const fs::path gt_path = request.gt_dir / name;
        if (!fs::is_regular_file(gt_path)) {
            throw InputError("no ground-truth mask for " + name + " in " +
                             request.gt_dir.string());
        }
        SegPair pair;
        pair.name = fs::path(name).stem().string();
        pair.pred = read_mask_png(request.pred_dir / name).mask;
        pair.gt = read_mask_png(gt_path).mask;
        pairs.push_back(std::move(pair));
    }

    const SegReport report = dataset_report(pairs, taxonomy, request.absent_as_one);
    if (!request.report_dir.empty()) {
        write_text_file(request.report_dir / "segmentation.json",
                        seg_report_json(report, taxonomy).dump(2) + "\n");
        write_text_file(request.report_dir / "segmentation.txt",
                        seg_report_text(report, taxonomy));
    }
    return report;
}

} // namespace traypipe
