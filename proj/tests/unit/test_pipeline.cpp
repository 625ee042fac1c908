#include "doctest.h"

#include "traypipe/csv.hpp"
#include "traypipe/errors.hpp"
#include "traypipe/image_io.hpp"
#include "traypipe/pipeline.hpp"

#include "test_support.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"

using namespace traypipe;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

/// Every regular file under dir, keyed by relative path, as raw bytes.
std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) {
            out[fs::relative(e.path(), dir).generic_string()] = read_bytes(e.path());
        }
    }
    return out;
}

struct EnvGuard {
    std::string name;
    std::optional<std::string> previous;

    EnvGuard(const char* n, const std::string& value) : name(n) {
        if (const char* old = std::getenv(n)) {
            previous = old;
        }
        ::setenv(n, value.c_str(), 1);
    }
    ~EnvGuard() {
        if (previous) {
            ::setenv(name.c_str(), previous->c_str(), 1);
        } else {
            ::unsetenv(name.c_str());
        }
    }
    EnvGuard(const EnvGuard&) = delete;
    EnvGuard& operator=(const EnvGuard&) = delete;
};

cv::Mat gradient_image(int width, int height) {
    cv::Mat img(height, width, CV_8UC3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            img.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<unsigned char>((x * 7 + y * 3) % 256),
                                                static_cast<unsigned char>((x + 2 * y) % 256),
                                                static_cast<unsigned char>((x / 3 + y * 5) % 256));
        }
    }
    return img;
}

// Four beetles in a 2x2 grid on a 240x180 tray, listed in reading order.
const std::vector<BBox> kGridBoxes = {
    {20.0, 20.0, 60.0, 50.0},    // top left
    {140.0, 20.0, 180.0, 50.0},  // top right
    {20.0, 100.0, 60.0, 130.0},  // bottom left
    {140.0, 100.0, 180.0, 130.0} // bottom right
};

ordered_json candidate_json(const BBox& box) {
    return ordered_json{{"x_min", box.x_min}, {"y_min", box.y_min}, {"x_max", box.x_max},
                        {"y_max", box.y_max}, {"box_score", 0.9},   {"text_score", 0.8}};
}

ordered_json rounds_json(const std::vector<std::vector<BBox>>& rounds) {
    auto arr = ordered_json::array();
    for (const auto& round : rounds) {
        auto r = ordered_json::array();
        for (const auto& box : round) {
            r.push_back(candidate_json(box));
        }
        arr.push_back(std::move(r));
    }
    return ordered_json{{"rounds", std::move(arr)}};
}

LabelMask fixture_mask() {
    LabelMask m = LabelMask::filled(64, 64, 0);
    for (int y = 4; y < 12; ++y) {
        for (int x = 24; x < 40; ++x) {
            m.at(x, y) = 1; // head
        }
    }
    for (int y = 14; y < 24; ++y) {
        for (int x = 24; x < 40; ++x) {
            m.at(x, y) = 2; // pronotum
        }
    }
    for (int y = 26; y < 52; ++y) {
        for (int x = 20; x < 44; ++x) {
            m.at(x, y) = 3; // elytra
        }
    }
    return m;
}

struct FixtureOptions {
    int tray_count = 1;
    std::string verifier_answer = "NO";
    int metadata_rows = 4; // rows per tray; -1 leaves metadata unconfigured
    bool metadata_as_dir = false;
    bool templated_detector = false;
};

/// Builds a complete scripted-pipeline fixture under root and returns the
/// config path. Detection finds the four grid beetles across two rounds,
/// deliberately out of reading order.
fs::path build_fixture(const fs::path& root, const FixtureOptions& opt = {}) {
    const cv::Mat tray = gradient_image(240, 180);
    std::vector<std::string> tray_ids;
    for (int n = 1; n <= opt.tray_count; ++n) {
        const std::string id = "t" + std::to_string(n);
        tray_ids.push_back(id);
        save_image_rgb(root / "trays" / (id + ".png"), tray);
    }

    const BBox& b0 = kGridBoxes[0];
    const BBox& b1 = kGridBoxes[1];
    const BBox& b2 = kGridBoxes[2];
    const BBox& b3 = kGridBoxes[3];
    if (opt.templated_detector) {
        write_text(root / "scripts" / "det_t1.json", rounds_json({{b0}, {}}).dump(2));
        write_text(root / "scripts" / "det_t2.json", rounds_json({{b0, b1}, {}}).dump(2));
        // t3 and beyond intentionally have no script.
    } else {
        write_text(root / "scripts" / "detector.json",
                   rounds_json({{b2, b0, b3}, {b1}, {}}).dump(2));
    }
    write_text(root / "scripts" / "verifier.json",
               ordered_json{{"answers", {opt.verifier_answer}}}.dump(2));
    write_text(root / "scripts" / "segmenter.json",
               ordered_json{{"taxonomy", "beetle5"}, {"masks", {"seg_mask.png"}}}.dump(2));
    write_mask_png(root / "scripts" / "seg_mask.png", fixture_mask(),
                   default_palette(Taxonomy::named("beetle5")));

    if (opt.metadata_rows >= 0) {
        if (opt.metadata_as_dir) {
            for (const auto& id : tray_ids) {
                std::string csv = "species,sex\n";
                for (int r = 0; r < opt.metadata_rows; ++r) {
                    csv += "species" + std::string(1, static_cast<char>('A' + r)) + "," +
                           (r % 2 == 0 ? "f" : "m") + "\n";
                }
                write_text(root / "meta" / (id + ".csv"), csv);
            }
        } else {
            std::string csv = "tray_id,species,sex\n";
            for (const auto& id : tray_ids) {
                for (int r = 0; r < opt.metadata_rows; ++r) {
                    csv += id + ",species" + std::string(1, static_cast<char>('A' + r)) + "," +
                           (r % 2 == 0 ? "f" : "m") + "\n";
                }
            }
            write_text(root / "meta.csv", csv);
        }
    }

    ordered_json cfg;
    cfg["input_dir"] = "trays";
    if (opt.metadata_rows >= 0) {
        if (opt.metadata_as_dir) {
            cfg["metadata_dir"] = "meta";
        } else {
            cfg["metadata_csv"] = "meta.csv";
        }
    }
    cfg["backends"] = {
        {"detector",
         {{"kind", "scripted"},
          {"script", opt.templated_detector ? "scripts/det_{tray_id}.json"
                                            : "scripts/detector.json"}}},
        {"verifier", {{"kind", "scripted"}, {"script", "scripts/verifier.json"}}},
        {"segmenter", {{"kind", "scripted"}, {"script", "scripts/segmenter.json"}}},
    };
    cfg["detection"] = {{"max_iterations", 6}};
    cfg["segmentation"] = {{"model_width", 64}, {"model_height", 64}};
    const fs::path config_path = root / "config.json";
    write_text(config_path, cfg.dump(2));
    return config_path;
}

} // namespace

TEST_CASE("glob_match follows shell rules") {
    CHECK(glob_match("*", "anything.png"));
    CHECK(glob_match("*.png", "tray_1.png"));
    CHECK_FALSE(glob_match("*.png", "tray_1.jpg"));
    CHECK(glob_match("tray_?.png", "tray_1.png"));
    CHECK_FALSE(glob_match("tray_?.png", "tray_10.png"));
    CHECK(glob_match("[ab]*", "a1"));
    CHECK(glob_match("[ab]*", "b"));
    CHECK_FALSE(glob_match("[ab]*", "c1"));
    CHECK(glob_match("t1", "t1"));
    CHECK_FALSE(glob_match("t1", "t12"));
}

TEST_CASE("pipeline config loading") {
    testsup::TempDir dir;

    SUBCASE("minimal config gets defaults and a stable run id") {
        const fs::path p = dir / "config.json";
        write_text(p, "{}");
        const PipelineConfig c = PipelineConfig::load(p);
        CHECK(c.image_glob == "*.png");
        CHECK(c.workers == 1);
        CHECK_FALSE(c.has_backends);
        CHECK(c.input_dir.empty());
        CHECK(c.output_dir.empty());
        CHECK(c.detection.box_threshold == 0.3);
        CHECK(c.sort.row_tolerance_factor == 0.5);
        CHECK(c.segmentation.taxonomy_name == "beetle5");

        CHECK(c.run_id.size() == 16);
        CHECK(c.run_id.find_first_not_of("0123456789abcdef") == std::string::npos);
        CHECK(PipelineConfig::load(p).run_id == c.run_id);

        // The id tracks the file bytes, not the parsed meaning.
        const fs::path q = dir / "config2.json";
        write_text(q, "{} ");
        CHECK(PipelineConfig::load(q).run_id != c.run_id);
    }
    SUBCASE("unknown keys anywhere are rejected") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"imput_dir": "trays"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"detection": {"box_thresh": 0.5}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"sort": {"padding": 3}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"segmentation": {"width": 64}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"backends": {"painter": {}}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
    SUBCASE("malformed files are rejected") {
        CHECK_THROWS_AS(PipelineConfig::load(dir / "missing.json"), ConfigError);
        const fs::path p = dir / "bad.json";
        write_text(p, "not json");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, "[1, 2]");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
    SUBCASE("relative inputs resolve against the config directory") {
        fs::create_directories(dir / "cfg");
        fs::create_directories(dir / "trays");
        const fs::path p = dir / "cfg" / "config.json";
        write_text(p, R"({"input_dir": "../trays"})");
        const PipelineConfig c = PipelineConfig::load(p);
        CHECK(fs::equivalent(c.input_dir, dir / "trays"));
    }
    SUBCASE("fixture root environment variable overrides the anchor") {
        fs::create_directories(dir / "elsewhere" / "trays");
        const fs::path p = dir / "config.json";
        write_text(p, R"({"input_dir": "trays"})");

        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError); // no trays/ next to config
        {
            EnvGuard env(kFixtureRootEnv, (dir / "elsewhere").string());
            const PipelineConfig c = PipelineConfig::load(p);
            CHECK(fs::equivalent(c.input_dir, dir / "elsewhere" / "trays"));
        }
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError); // guard restored
    }
    SUBCASE("output_dir stays as written") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"output_dir": "out/run1"})");
        CHECK(PipelineConfig::load(p).output_dir == fs::path("out/run1"));
    }
    SUBCASE("referenced inputs must exist") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"input_dir": "nope"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"metadata_csv": "nope.csv"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"metadata_dir": "nope"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"ground_truth_csv": "nope.csv"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
    SUBCASE("metadata_csv and metadata_dir are mutually exclusive") {
        write_text(dir / "meta.csv", "tray_id,species\n");
        fs::create_directories(dir / "meta");
        const fs::path p = dir / "config.json";
        write_text(p, R"({"metadata_csv": "meta.csv", "metadata_dir": "meta"})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
    SUBCASE("workers must be positive") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"workers": 0})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"workers": 3})");
        CHECK(PipelineConfig::load(p).workers == 3);
    }
    SUBCASE("backends section needs all three roles") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"backends": {"detector": {"kind": "scripted", "script": "d.json"}}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
    SUBCASE("scripted backends need their script files now") {
        const fs::path p = dir / "config.json";
        const std::string tail =
            R"("verifier": {"kind": "scripted", "script": "v.json"},
               "segmenter": {"kind": "scripted", "script": "s.json"}}})";
        write_text(dir / "v.json", "{}");
        write_text(dir / "s.json", "{}");
        write_text(p, R"({"backends": {"detector": {"kind": "scripted", "script": "d.json"},)" +
                           tail);
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError); // d.json missing
        write_text(dir / "d.json", "{}");
        CHECK(PipelineConfig::load(p).has_backends);
        CHECK(PipelineConfig::load(p).detector.kind == "scripted");
    }
    SUBCASE("templated scripts only need their directory") {
        const fs::path p = dir / "config.json";
        write_text(dir / "v.json", "{}");
        write_text(dir / "s.json", "{}");
        const std::string body =
            R"({"backends": {"detector": {"kind": "scripted", "script": "scripts/{tray_id}.json"},
                "verifier": {"kind": "scripted", "script": "v.json"},
                "segmenter": {"kind": "scripted", "script": "s.json"}}})";
        write_text(p, body);
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError); // scripts/ missing
        fs::create_directories(dir / "scripts");
        CHECK_NOTHROW(PipelineConfig::load(p));
    }
    SUBCASE("detection value errors surface at load") {
        const fs::path p = dir / "config.json";
        write_text(p, R"({"detection": {"max_iterations": 0}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"segmentation": {"overlay_alpha": 1.5}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"detection": {"mask_fill": [0, 0]}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
        write_text(p, R"({"detection": {"mask_fill": [0, 0, 300]}})");
        CHECK_THROWS_AS(PipelineConfig::load(p), ConfigError);
    }
}

TEST_CASE("discover_trays filters and sorts") {
    testsup::TempDir dir;
    fs::create_directories(dir / "trays" / "sub");
    const cv::Mat img = gradient_image(8, 8);
    save_image_rgb(dir / "trays" / "zeta.png", img);
    save_image_rgb(dir / "trays" / "alpha.png", img);
    save_image_rgb(dir / "trays" / "mid.png", img);
    write_text(dir / "trays" / "notes.txt", "not an image");
    save_image_rgb(dir / "trays" / "sub" / "nested.png", img); // ignored: not top level

    const fs::path p = dir / "config.json";
    write_text(p, R"({"input_dir": "trays"})");
    const PipelineConfig config = PipelineConfig::load(p);

    SUBCASE("image glob plus tray glob, sorted by id") {
        const auto all = discover_trays(config, "*");
        REQUIRE(all.size() == 3);
        CHECK(all[0].tray_id == "alpha");
        CHECK(all[1].tray_id == "mid");
        CHECK(all[2].tray_id == "zeta");
        CHECK(all[0].image_filename == "alpha.png");

        const auto some = discover_trays(config, "[mz]*");
        REQUIRE(some.size() == 2);
        CHECK(some[0].tray_id == "mid");
        CHECK(some[1].tray_id == "zeta");

        CHECK(discover_trays(config, "nomatch*").empty());
    }
    SUBCASE("wider image glob admits other files and catches id clashes") {
        write_text(p, R"({"input_dir": "trays", "image_glob": "*"})");
        PipelineConfig wide = PipelineConfig::load(p);
        const auto all = discover_trays(wide, "*");
        CHECK(all.size() == 4); // notes.txt joins as tray id "notes"

        write_text(dir / "trays" / "alpha.jpg", "pretend image");
        CHECK_THROWS_AS(discover_trays(wide, "*"), ConfigError); // alpha.png vs alpha.jpg
    }
    SUBCASE("config without input_dir cannot discover") {
        write_text(p, "{}");
        const PipelineConfig empty = PipelineConfig::load(p);
        CHECK_THROWS_AS(discover_trays(empty, "*"), ConfigError);
    }
}

TEST_CASE("full scripted pipeline run") {
    testsup::TempDir dir;
    const fs::path config_path = build_fixture(dir.path);
    PipelineConfig config = PipelineConfig::load(config_path);
    config.output_dir = dir / "out1";

    const auto summaries = run_all_stages(config, StageRequest{});
    REQUIRE(summaries.size() == 3);
    for (const auto& s : summaries) {
        CHECK(s.selected == 1);
        CHECK(s.done == 1);
        CHECK(s.flagged == 0);
        CHECK(s.failed == 0);
        CHECK(s.skipped_resume == 0);
        CHECK(s.skipped_prereq == 0);
        CHECK(s.messages.empty());
    }
    CHECK(summaries[0].stage == "detect");
    CHECK(summaries[1].stage == "crop");
    CHECK(summaries[2].stage == "segment");

    const RunManifest manifest = load_manifest(config.output_dir / "manifest.json");
    CHECK(manifest.run_id == config.run_id);
    REQUIRE(manifest.trays.count("t1") == 1);
    const TrayEntry& t1 = manifest.trays.at("t1");

    SUBCASE("detect stage artifacts") {
        CHECK(t1.image_path == "t1.png");
        CHECK(t1.detect.status == StageStatus::Done);
        CHECK(t1.detect.detections_path == "detections/t1.json");
        CHECK(t1.detect.detection_count == 4);
        CHECK(t1.detect.iterations_used == 3);
        CHECK(t1.detect.verdict == "VERIFIED_CLEAR");
        CHECK(t1.detect.raw_answer == "NO");

        const DetectionOutcome outcome =
            read_detections_json(config.output_dir / t1.detect.detections_path);
        REQUIRE(outcome.detections.size() == 4);
        // Discovery order: bottom-left, top-left, bottom-right in round 0,
        // then top-right in round 1.
        CHECK(outcome.detections[0].box.y_min == 100.0);
        CHECK(outcome.detections[1].box.x_min == 20.0);
        CHECK(outcome.detections[1].box.y_min == 20.0);
        CHECK(outcome.detections[3].box.x_min == 140.0);
        CHECK(outcome.detections[0].iteration == 0);
        CHECK(outcome.detections[2].iteration == 0);
        CHECK(outcome.detections[3].iteration == 1);
        CHECK(outcome.iterations_used == 3);
        CHECK(outcome.verdict == Verdict::VerifiedClear);
    }
    SUBCASE("crop stage artifacts in reading order") {
        CHECK(t1.crop.status == StageStatus::Done);
        CHECK(t1.crop.metadata_matched);
        CHECK(t1.crop.csv_path == "crops/t1/t1.csv");
        REQUIRE(t1.crop.crop_paths.size() == 4);
        CHECK(t1.crop.crop_paths[0] == "crops/t1/t1_000.png");
        CHECK(t1.crop.crop_paths[3] == "crops/t1/t1_003.png");

        const cv::Mat tray = load_image_rgb(config.input_dir / "t1.png");
        for (std::size_t k = 0; k < 4; ++k) {
            const cv::Mat crop = load_image_rgb(config.output_dir / t1.crop.crop_paths[k]);
            const BBox& b = kGridBoxes[k];
            const cv::Rect rect(static_cast<int>(b.x_min), static_cast<int>(b.y_min),
                                static_cast<int>(b.x_max - b.x_min),
                                static_cast<int>(b.y_max - b.y_min));
            CHECK(crop.cols == rect.width);
            CHECK(crop.rows == rect.height);
            CHECK(cv::norm(crop, tray(rect), cv::NORM_INF) == 0.0);
        }

        const CsvTable csv = read_csv_file(config.output_dir / t1.crop.csv_path);
        // Geometry columns, the joined metadata, and the post-segmentation
        // completeness column.
        CHECK(csv.header ==
              std::vector<std::string>{"tray_id", "crop_index", "crop_filename", "x_min",
                                       "y_min", "x_max", "y_max", "box_score", "species",
                                       "sex", "missing_parts"});
        REQUIRE(csv.rows.size() == 4);
        CHECK(csv.rows[0][0] == "t1");
        CHECK(csv.rows[0][2] == "t1_000.png");
        CHECK(csv.rows[0][3] == "20");
        CHECK(csv.rows[0][4] == "20");
        CHECK(csv.rows[1][3] == "140");
        CHECK(csv.rows[2][4] == "100");
        CHECK(csv.rows[0][8] == "speciesA");
        CHECK(csv.rows[3][8] == "speciesD");
        CHECK(csv.rows[0][10] == "");
        CHECK(csv.rows[3][10] == "");
    }
    SUBCASE("segment stage artifacts") {
        CHECK(t1.segment.status == StageStatus::Done);
        REQUIRE(t1.segment.mask_paths.size() == 4);
        REQUIRE(t1.segment.overlay_paths.size() == 4);
        CHECK(t1.segment.mask_paths[0] == "segmentation/t1/t1_000_mask.png");
        CHECK(t1.segment.overlay_paths[0] == "segmentation/t1/t1_000_overlay.png");

        const Taxonomy taxonomy = config.taxonomy();
        for (std::size_t k = 0; k < 4; ++k) {
            const LabelMask mask =
                read_mask_png(config.output_dir / t1.segment.mask_paths[k]).mask;
            CHECK(mask.width == 40); // native crop size, not model size
            CHECK(mask.height == 30);
            CHECK(mask.valid_for(taxonomy));
            const cv::Mat overlay =
                load_image_rgb(config.output_dir / t1.segment.overlay_paths[k]);
            CHECK(overlay.cols == 40);
            CHECK(overlay.rows == 30);
        }
    }
    SUBCASE("no flags, and reruns are byte-identical") {
        CHECK(read_bytes(config.output_dir / "flagged.txt").empty());

        PipelineConfig second = PipelineConfig::load(config_path);
        second.output_dir = dir / "out2";
        run_all_stages(second, StageRequest{});
        CHECK(tree_bytes(dir / "out1") == tree_bytes(dir / "out2"));
    }
}

TEST_CASE("resume skips and reruns reset downstream stages") {
    testsup::TempDir dir;
    const fs::path config_path = build_fixture(dir.path);
    PipelineConfig config = PipelineConfig::load(config_path);
    config.output_dir = dir / "out";
    run_all_stages(config, StageRequest{});

    StageRequest resume;
    resume.resume = true;

    const auto skipped = run_stage(config, StageKind::Detect, resume);
    CHECK(skipped.skipped_resume == 1);
    CHECK(skipped.done == 0);
    CHECK(skipped.succeeded() == 1);
    CHECK(load_manifest(config.output_dir / "manifest.json").trays.at("t1").crop.status ==
          StageStatus::Done); // untouched

    // A forced re-detect invalidates crop and segment results.
    const auto redetect = run_stage(config, StageKind::Detect, StageRequest{});
    CHECK(redetect.done == 1);
    {
        const RunManifest m = load_manifest(config.output_dir / "manifest.json");
        CHECK(m.trays.at("t1").detect.status == StageStatus::Done);
        CHECK(m.trays.at("t1").crop.status == StageStatus::Pending);
        CHECK(m.trays.at("t1").segment.status == StageStatus::Pending);
    }

    // Segment cannot run until crop completes again.
    const auto blocked = run_stage(config, StageKind::Segment, StageRequest{});
    CHECK(blocked.skipped_prereq == 1);
    CHECK(blocked.done == 0);
    REQUIRE(blocked.messages.size() == 1);
    CHECK(blocked.messages[0].find("cropping has not completed") != std::string::npos);

    CHECK(run_stage(config, StageKind::Crop, StageRequest{}).done == 1);
    CHECK(run_stage(config, StageKind::Segment, StageRequest{}).done == 1);
    const RunManifest m = load_manifest(config.output_dir / "manifest.json");
    CHECK(m.trays.at("t1").segment.status == StageStatus::Done);
}

TEST_CASE("residual-verifier answer flags the tray but later stages continue") {
    testsup::TempDir dir;
    FixtureOptions opt;
    opt.verifier_answer = "YES";
    const fs::path config_path = build_fixture(dir.path, opt);
    PipelineConfig config = PipelineConfig::load(config_path);
    config.output_dir = dir / "out";

    const auto summaries = run_all_stages(config, StageRequest{});
    CHECK(summaries[0].flagged == 1);
    CHECK(summaries[0].done == 0);
    CHECK(summaries[0].succeeded() == 1);
    REQUIRE(summaries[0].messages.size() == 1);
    CHECK(summaries[1].done == 1);
    CHECK(summaries[2].done == 1);

    const RunManifest m = load_manifest(config.output_dir / "manifest.json");
    const TrayEntry& t1 = m.trays.at("t1");
    CHECK(t1.detect.status == StageStatus::Flagged);
    CHECK(t1.detect.verdict == "FLAGGED_RESIDUAL");
    CHECK(t1.detect.reason == "verifier reports residual beetles: \"YES\"");
    CHECK(t1.detect.detection_count == 4); // outputs kept despite the flag
    CHECK(t1.crop.status == StageStatus::Done);
    CHECK(t1.segment.status == StageStatus::Done);

    CHECK(read_bytes(config.output_dir / "flagged.txt") ==
          "tray t1 [detect] flagged: verifier reports residual beetles: \"YES\"\n");
}

TEST_CASE("metadata variants") {
    SUBCASE("row-count mismatch flags the crop stage, geometry still written") {
        testsup::TempDir dir;
        FixtureOptions opt;
        opt.metadata_rows = 2; // four beetles detected
        const fs::path config_path = build_fixture(dir.path, opt);
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";

        const auto summaries = run_all_stages(config, StageRequest{});
        CHECK(summaries[1].flagged == 1);
        CHECK(summaries[2].done == 1); // segment proceeds over the flag

        const RunManifest m = load_manifest(config.output_dir / "manifest.json");
        const TrayEntry& t1 = m.trays.at("t1");
        CHECK(t1.crop.status == StageStatus::Flagged);
        CHECK_FALSE(t1.crop.metadata_matched);
        CHECK(t1.crop.reason.find("2") != std::string::npos);
        CHECK(t1.crop.reason.find("4") != std::string::npos);
        CHECK(t1.crop.crop_paths.size() == 4);

        const CsvTable csv = read_csv_file(config.output_dir / t1.crop.csv_path);
        REQUIRE(csv.header.size() == 9); // geometry + missing_parts, no metadata columns
        CHECK(csv.header[8] == "missing_parts");
        CHECK(csv.rows.size() == 4);

        const std::string flagged = read_bytes(config.output_dir / "flagged.txt");
        CHECK(flagged.find("tray t1 [crop] flagged:") != std::string::npos);
    }
    SUBCASE("per-tray metadata directory joins like the master CSV") {
        testsup::TempDir dir;
        FixtureOptions opt;
        opt.metadata_as_dir = true;
        const fs::path config_path = build_fixture(dir.path, opt);
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";

        run_all_stages(config, StageRequest{});
        const RunManifest m = load_manifest(config.output_dir / "manifest.json");
        CHECK(m.trays.at("t1").crop.status == StageStatus::Done);
        CHECK(m.trays.at("t1").crop.metadata_matched);
        const CsvTable csv =
            read_csv_file(config.output_dir / m.trays.at("t1").crop.csv_path);
        CHECK(csv.header.size() == 11);
        CHECK(csv.rows[1][8] == "speciesB");
    }
    SUBCASE("no metadata configured means geometry-only output, no flag") {
        testsup::TempDir dir;
        FixtureOptions opt;
        opt.metadata_rows = -1;
        const fs::path config_path = build_fixture(dir.path, opt);
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";

        run_all_stages(config, StageRequest{});
        const RunManifest m = load_manifest(config.output_dir / "manifest.json");
        CHECK(m.trays.at("t1").crop.status == StageStatus::Done);
        CHECK_FALSE(m.trays.at("t1").crop.metadata_matched);
        const CsvTable csv =
            read_csv_file(config.output_dir / m.trays.at("t1").crop.csv_path);
        CHECK(csv.header.size() == 9);
    }
}

TEST_CASE("backend failures mark the tray failed and block downstream stages") {
    testsup::TempDir dir;
    const fs::path config_path = build_fixture(dir.path);
    PipelineConfig config = PipelineConfig::load(config_path);
    config.output_dir = dir / "out";

    fs::remove(dir / "scripts" / "detector.json"); // vanishes after load

    const auto detect = run_stage(config, StageKind::Detect, StageRequest{});
    CHECK(detect.failed == 1);
    CHECK(detect.done == 0);
    CHECK(detect.succeeded() == 0);
    REQUIRE(detect.messages.size() == 1);
    CHECK(detect.messages[0].find("[detect] failed:") != std::string::npos);

    const RunManifest m = load_manifest(config.output_dir / "manifest.json");
    CHECK(m.trays.at("t1").detect.status == StageStatus::Failed);
    CHECK_FALSE(m.trays.at("t1").detect.reason.empty());
    CHECK(read_bytes(config.output_dir / "flagged.txt").find("[detect] failed:") !=
          std::string::npos);

    const auto crop = run_stage(config, StageKind::Crop, StageRequest{});
    CHECK(crop.skipped_prereq == 1);
    CHECK(crop.done == 0);
}

TEST_CASE("run_stage guards") {
    testsup::TempDir dir;
    const fs::path config_path = build_fixture(dir.path);

    SUBCASE("needs an output directory") {
        PipelineConfig config = PipelineConfig::load(config_path);
        CHECK_THROWS_AS(run_stage(config, StageKind::Detect, StageRequest{}), ConfigError);
    }
    SUBCASE("needs at least one matching tray") {
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";
        StageRequest request;
        request.tray_glob = "zzz*";
        CHECK_THROWS_AS(run_stage(config, StageKind::Detect, request), ConfigError);
    }
    SUBCASE("unknown backend kind is rejected when backends are built") {
        auto j = ordered_json::parse(read_bytes(config_path));
        j["backends"]["detector"]["kind"] = "http";
        const fs::path other = dir / "config_http.json";
        write_text(other, j.dump(2));
        PipelineConfig config = PipelineConfig::load(other);
        config.output_dir = dir / "out_http";
        CHECK_THROWS_AS(run_stage(config, StageKind::Detect, StageRequest{}), ConfigError);
    }
    SUBCASE("an output tree from a different config is refused") {
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";
        run_stage(config, StageKind::Detect, StageRequest{});

        write_text(config_path, read_bytes(config_path) + "\n");
        PipelineConfig changed = PipelineConfig::load(config_path);
        changed.output_dir = dir / "out";
        CHECK(changed.run_id != config.run_id);
        CHECK_THROWS_AS(run_stage(changed, StageKind::Detect, StageRequest{}), ConfigError);
    }
}

TEST_CASE("worker pools leave no trace in the outputs") {
    testsup::TempDir dir;
    FixtureOptions opt;
    opt.tray_count = 6;
    const fs::path config_path = build_fixture(dir.path, opt);

    PipelineConfig serial = PipelineConfig::load(config_path);
    serial.output_dir = dir / "out_serial";
    serial.workers = 1;
    run_all_stages(serial, StageRequest{});

    PipelineConfig parallel = PipelineConfig::load(config_path);
    parallel.output_dir = dir / "out_parallel";
    parallel.workers = 4;
    const auto summaries = run_all_stages(parallel, StageRequest{});
    CHECK(summaries[0].done == 6);
    CHECK(summaries[2].done == 6);

    CHECK(tree_bytes(dir / "out_serial") == tree_bytes(dir / "out_parallel"));
}

TEST_CASE("templated per-tray detector scripts") {
    testsup::TempDir dir;
    FixtureOptions opt;
    opt.tray_count = 3;
    opt.templated_detector = true;
    opt.metadata_rows = -1;
    const fs::path config_path = build_fixture(dir.path, opt);
    PipelineConfig config = PipelineConfig::load(config_path);
    config.output_dir = dir / "out";

    const auto detect = run_stage(config, StageKind::Detect, StageRequest{});
    CHECK(detect.done == 2);
    CHECK(detect.failed == 1); // t3 has no script file

    const RunManifest m = load_manifest(config.output_dir / "manifest.json");
    CHECK(m.trays.at("t1").detect.detection_count == 1);
    CHECK(m.trays.at("t2").detect.detection_count == 2);
    CHECK(m.trays.at("t3").detect.status == StageStatus::Failed);
    CHECK(m.trays.at("t3").detect.reason.find("det_t3") != std::string::npos);
}

TEST_CASE("count evaluation") {
    testsup::TempDir dir;

    SUBCASE("direct counts CSV with reports") {
        const fs::path csv = dir / "counts.csv";
        write_text(csv, "tray_id,detected_count,ground_truth_count\n"
                        "a,5,5\nb,4,5\nc,6,6\n");
        CountsEvalRequest request;
        request.counts_csv = csv;
        request.report_dir = dir / "reports";
        const CountReport r = evaluate_counts(request);
        CHECK(r.total_trays == 3);
        CHECK(r.exact_matches == 2);
        CHECK(r.under_count_trays == 1);

        const auto j = nlohmann::json::parse(read_bytes(dir / "reports" / "counts.json"));
        CHECK(j.at("accuracy_display") == "66.67%");
        CHECK(read_bytes(dir / "reports" / "counts.txt").find("accuracy:      66.67%") !=
              std::string::npos);
    }
    SUBCASE("CSV schema problems") {
        const fs::path csv = dir / "counts.csv";
        write_text(csv, "tray_id,detected_count\na,5\n");
        CountsEvalRequest request;
        request.counts_csv = csv;
        CHECK_THROWS_AS(evaluate_counts(request), ConfigError); // missing column
        write_text(csv, "tray_id,detected_count,ground_truth_count\na,five,5\n");
        CHECK_THROWS_AS(evaluate_counts(request), ConfigError); // not an integer
    }
    SUBCASE("manifest mode") {
        const fs::path config_path = build_fixture(dir.path);
        PipelineConfig config = PipelineConfig::load(config_path);
        config.output_dir = dir / "out";
        run_stage(config, StageKind::Detect, StageRequest{});

        CountsEvalRequest request;
        request.manifest_path = config.output_dir / "manifest.json";
        request.ground_truth_csv = dir / "gt.csv";
        write_text(request.ground_truth_csv, "tray_id,ground_truth_count\nt1,4\n");
        const CountReport exact = evaluate_counts(request);
        CHECK(exact.total_trays == 1);
        CHECK(exact.exact_matches == 1);

        write_text(request.ground_truth_csv, "tray_id,ground_truth_count\nt1,5\n");
        const CountReport under = evaluate_counts(request);
        CHECK(under.under_count_trays == 1);

        write_text(request.ground_truth_csv, "tray_id,ground_truth_count\nother,4\n");
        CHECK_THROWS_AS(evaluate_counts(request), InputError); // no row for t1
    }
    SUBCASE("request validation") {
        CHECK_THROWS_AS(evaluate_counts(CountsEvalRequest{}), ConfigError);

        CountsEvalRequest request;
        request.manifest_path = dir / "nope" / "manifest.json";
        request.ground_truth_csv = dir / "gt.csv";
        CHECK_THROWS_AS(evaluate_counts(request), InputError); // gt file missing

        write_text(request.ground_truth_csv, "tray_id,ground_truth_count\nt1,4\n");
        CHECK_THROWS_AS(evaluate_counts(request), IoError); // manifest missing
    }
    SUBCASE("a manifest with no completed detections has nothing to score") {
        RunManifest m;
        m.run_id = "feedfeedfeedfeed";
        TrayEntry pending;
        pending.image_path = "t1.png";
        m.trays["t1"] = pending;
        const fs::path manifest_path = dir / "manifest.json";
        save_manifest_atomic(m, manifest_path);

        CountsEvalRequest request;
        request.manifest_path = manifest_path;
        request.ground_truth_csv = dir / "gt.csv";
        write_text(request.ground_truth_csv, "tray_id,ground_truth_count\nt1,4\n");
        CHECK_THROWS_AS(evaluate_counts(request), InputError);
    }
}

TEST_CASE("segmentation evaluation") {
    testsup::TempDir dir;
    const Taxonomy t5 = Taxonomy::named("beetle5");
    const Palette palette = default_palette(t5);

    LabelMask head_only = LabelMask::filled(8, 8, 0);
    for (int x = 2; x < 6; ++x) {
        head_only.at(x, 2) = 1;
    }
    LabelMask two_parts = head_only;
    for (int x = 2; x < 6; ++x) {
        two_parts.at(x, 5) = 3;
    }

    SUBCASE("directory pair scored by filename") {
        write_mask_png(dir / "pred" / "a.png", head_only, palette);
        write_mask_png(dir / "pred" / "b.png", two_parts, palette);
        write_mask_png(dir / "gt" / "a.png", head_only, palette);
        write_mask_png(dir / "gt" / "b.png", two_parts, palette);

        SegEvalRequest request;
        request.pred_dir = dir / "pred";
        request.gt_dir = dir / "gt";
        request.report_dir = dir / "reports";
        const SegReport r = evaluate_segmentation(request);
        REQUIRE(r.images.size() == 2);
        CHECK(r.images[0].name == "a");
        CHECK(r.images[1].name == "b");
        REQUIRE(r.dataset_miou.has_value());
        CHECK(*r.dataset_miou == 1.0);

        CHECK(read_bytes(dir / "reports" / "segmentation.txt").find("100.00%") !=
              std::string::npos);
        const auto j =
            nlohmann::json::parse(read_bytes(dir / "reports" / "segmentation.json"));
        CHECK(j.at("dataset_miou") == 1.0);
        CHECK(j.at("taxonomy") == "beetle5");
    }
    SUBCASE("absent-in-both classes can score 1.0 on request") {
        write_mask_png(dir / "pred" / "a.png", head_only, palette);
        write_mask_png(dir / "gt" / "a.png", head_only, palette);
        SegEvalRequest request;
        request.pred_dir = dir / "pred";
        request.gt_dir = dir / "gt";

        const SegReport strict = evaluate_segmentation(request);
        CHECK_FALSE(strict.dataset_class_iou[2].has_value());

        request.absent_as_one = true;
        const SegReport lenient = evaluate_segmentation(request);
        CHECK(lenient.absent_as_one);
        CHECK(lenient.dataset_class_iou[2] == 1.0);
    }
    SUBCASE("problems are refused loudly") {
        SegEvalRequest request;
        request.pred_dir = dir / "pred";
        request.gt_dir = dir / "gt";
        CHECK_THROWS_AS(evaluate_segmentation(request), InputError); // dirs missing

        fs::create_directories(dir / "pred");
        fs::create_directories(dir / "gt");
        CHECK_THROWS_AS(evaluate_segmentation(request), InputError); // no mask files

        write_mask_png(dir / "pred" / "a.png", head_only, palette);
        CHECK_THROWS_AS(evaluate_segmentation(request), InputError); // no gt counterpart
    }
}

TEST_CASE("flagged summary lines") {
    RunManifest m;
    m.run_id = "beefbeefbeefbeef";

    TrayEntry ok;
    ok.image_path = "a.png";
    ok.detect.status = StageStatus::Done;
    ok.detect.detections_path = "detections/a.json";
    m.trays["a"] = ok;

    TrayEntry bad;
    bad.image_path = "b.png";
    bad.detect.status = StageStatus::Flagged;
    bad.detect.reason = "iteration cap reached after 6 rounds";
    bad.detect.detections_path = "detections/b.json";
    bad.crop.status = StageStatus::Done;
    bad.crop.csv_path = "crops/b/b.csv";
    bad.segment.status = StageStatus::Failed;
    bad.segment.reason = "segmenter backend unreachable";
    m.trays["b"] = bad;

    const auto lines = flagged_summary_lines(m);
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "tray b [detect] flagged: iteration cap reached after 6 rounds");
    CHECK(lines[1] == "tray b [segment] failed: segmenter backend unreachable");
}
