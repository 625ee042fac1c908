#include "traypipe/backends.hpp"

#include "traypipe/errors.hpp"
#include "traypipe/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <mutex>
#include <utility>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <httplib.h>
#include <json.hpp>

namespace traypipe {

namespace {

using nlohmann::json;

json parse_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open fixture: " + path.string());
    }
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("fixture is not valid JSON: " + path.string());
    }
    return j;
}

double score_field(const json& j, const char* key, const std::filesystem::path& path) {
    if (!j.contains(key) || !j.at(key).is_number()) {
        throw ConfigError("candidate missing numeric \"" + std::string(key) + "\" in " +
                          path.string());
    }
    const double v = j.at(key).get<double>();
    if (v < 0.0 || v > 1.0) {
        throw ConfigError("score " + std::string(key) + "=" + std::to_string(v) +
                          " outside [0,1] in " + path.string());
    }
    return v;
}

double coord_field(const json& j, const char* key, const std::filesystem::path& path) {
    if (!j.contains(key) || !j.at(key).is_number()) {
        throw ConfigError("candidate missing numeric \"" + std::string(key) + "\" in " +
                          path.string());
    }
    return j.at(key).get<double>();
}

const std::string kBase64Chars =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const unsigned char* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        const unsigned b0 = data[i];
        const unsigned b1 = i + 1 < len ? data[i + 1] : 0;
        const unsigned b2 = i + 2 < len ? data[i + 2] : 0;
        out += kBase64Chars[b0 >> 2];
        out += kBase64Chars[((b0 & 0x03u) << 4) | (b1 >> 4)];
        out += i + 1 < len ? kBase64Chars[((b1 & 0x0Fu) << 2) | (b2 >> 6)] : '=';
        out += i + 2 < len ? kBase64Chars[b2 & 0x3Fu] : '=';
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    int acc = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') {
            continue;
        }
        const int v = value_of(c);
        if (v < 0) {
            throw StageError("invalid base64 in backend response");
        }
        acc = (acc << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xFF));
        }
    }
    return out;
}

std::string encode_png_base64(const cv::Mat& image_rgb) {
    cv::Mat bgr;
    cv::cvtColor(image_rgb, bgr, cv::COLOR_RGB2BGR);
    std::vector<unsigned char> bytes;
    if (!cv::imencode(".png", bgr, bytes)) {
        throw StageError("PNG encoding failed");
    }
    return base64_encode(bytes.data(), bytes.size());
}

json post_json(const std::string& base_url, const std::string& route, const json& request) {
    httplib::Client client(base_url);
    client.set_connection_timeout(30, 0);
    client.set_read_timeout(600, 0);
    client.set_write_timeout(600, 0);
    auto res = client.Post(route, request.dump(), "application/json");
    if (!res) {
        throw StageError("no response from " + base_url + route);
    }
    if (res->status != 200) {
        throw StageError("backend " + base_url + route + " returned HTTP " +
                         std::to_string(res->status));
    }
    json j = json::parse(res->body, nullptr, false);
    if (j.is_discarded()) {
        throw StageError("backend " + base_url + route + " returned invalid JSON");
    }
    return j;
}

// Reference detector over HTTP. The service wraps the grounding-dino-base
// checkpoint and must reply with corner-format boxes (x_min, y_min, x_max,
// y_max) in absolute pixels of the posted image; the adapter clamps boxes
// to the image and scores to [0,1], and drops boxes left with no area.
class HttpDetector final : public DetectorBackend {
public:
    explicit HttpDetector(std::string base_url) : base_url_(std::move(base_url)) {}

    std::vector<Candidate> detect(const cv::Mat& image_rgb, const std::string& text_prompt) override {
        const json req{{"image_png_base64", encode_png_base64(image_rgb)}, {"prompt", text_prompt}};
        const json res = post_json(base_url_, "/detect", req);
        if (!res.contains("candidates") || !res.at("candidates").is_array()) {
            throw StageError("detector response missing \"candidates\" array");
        }
        std::vector<Candidate> out;
        const double w = image_rgb.cols;
        const double h = image_rgb.rows;
        for (const auto& c : res.at("candidates")) {
            Candidate cand;
            cand.box.x_min = std::clamp(c.at("x_min").get<double>(), 0.0, w);
            cand.box.y_min = std::clamp(c.at("y_min").get<double>(), 0.0, h);
            cand.box.x_max = std::clamp(c.at("x_max").get<double>(), 0.0, w);
            cand.box.y_max = std::clamp(c.at("y_max").get<double>(), 0.0, h);
            cand.box_score = std::clamp(c.at("box_score").get<double>(), 0.0, 1.0);
            cand.text_score = std::clamp(c.at("text_score").get<double>(), 0.0, 1.0);
            if (box_valid(cand.box)) {
                out.push_back(cand);
            }
        }
        return out;
    }

private:
    std::string base_url_;
};

// Reference verifier over HTTP, wrapping the llava-v1.6-mistral-7b-hf
// checkpoint.
class HttpVerifier final : public VerifierBackend {
public:
    explicit HttpVerifier(std::string base_url) : base_url_(std::move(base_url)) {}

    std::string ask(const cv::Mat& image_rgb, const std::string& question) override {
        const json req{{"image_png_base64", encode_png_base64(image_rgb)}, {"prompt", question}};
        const json res = post_json(base_url_, "/verify", req);
        if (!res.contains("answer") || !res.at("answer").is_string()) {
            throw StageError("verifier response missing \"answer\"");
        }
        auto answer = res.at("answer").get<std::string>();
        if (answer.empty()) {
            throw StageError("verifier returned an empty answer");
        }
        return answer;
    }

private:
    std::string base_url_;
};

// Reference segmenter over HTTP, wrapping a mask2former-swin-large
// fine-tune per taxonomy. Replies with raw row-major class-id bytes.
class HttpSegmenter final : public SegmenterBackend {
public:
    explicit HttpSegmenter(std::string base_url) : base_url_(std::move(base_url)) {}

    LabelMask segment(const cv::Mat& image_rgb, const Taxonomy& taxonomy) override {
        const json req{{"image_png_base64", encode_png_base64(image_rgb)},
                       {"taxonomy", taxonomy.name()}};
        const json res = post_json(base_url_, "/segment", req);
        for (const char* key : {"width", "height", "labels_base64"}) {
            if (!res.contains(key)) {
                throw StageError("segmenter response missing \"" + std::string(key) + "\"");
            }
        }
        LabelMask mask;
        mask.width = res.at("width").get<int>();
        mask.height = res.at("height").get<int>();
        const auto bytes = base64_decode(res.at("labels_base64").get<std::string>());
        if (mask.width <= 0 || mask.height <= 0 ||
            bytes.size() != static_cast<std::size_t>(mask.width) * mask.height) {
            throw StageError("segmenter returned inconsistent mask dimensions");
        }
        mask.labels.assign(bytes.begin(), bytes.end());
        return mask;
    }

private:
    std::string base_url_;
};

} // namespace

ScriptedDetector::ScriptedDetector(
    std::shared_ptr<const std::vector<std::vector<Candidate>>> rounds)
    : rounds_(std::move(rounds)) {
    if (!rounds_) {
        throw ConfigError("scripted detector needs a fixture");
    }
}

std::vector<Candidate> ScriptedDetector::detect(const cv::Mat&, const std::string&) {
    if (next_ >= rounds_->size()) {
        ++next_;
        return {};
    }
    return (*rounds_)[next_++];
}

ScriptedVerifier::ScriptedVerifier(std::shared_ptr<const std::vector<std::string>> answers)
    : answers_(std::move(answers)) {
    if (!answers_ || answers_->empty()) {
        throw ConfigError("scripted verifier needs at least one answer");
    }
}

std::string ScriptedVerifier::ask(const cv::Mat&, const std::string&) {
    const std::size_t i = std::min(next_, answers_->size() - 1);
    ++next_;
    return (*answers_)[i];
}

ScriptedSegmenter::ScriptedSegmenter(std::shared_ptr<const std::vector<LabelMask>> masks,
                                     std::string taxonomy_name)
    : masks_(std::move(masks)), taxonomy_name_(std::move(taxonomy_name)) {
    if (!masks_ || masks_->empty()) {
        throw ConfigError("scripted segmenter needs at least one mask");
    }
}

LabelMask ScriptedSegmenter::segment(const cv::Mat&, const Taxonomy& taxonomy) {
    if (taxonomy.name() != taxonomy_name_) {
        throw ConfigError("scripted segmenter fixture is for taxonomy " + taxonomy_name_ +
                          ", pipeline uses " + taxonomy.name());
    }
    const std::size_t i = std::min(next_, masks_->size() - 1);
    ++next_;
    return (*masks_)[i];
}

std::shared_ptr<const std::vector<std::vector<Candidate>>>
load_detector_script(const std::filesystem::path& path) {
    const json j = parse_json_file(path);
    if (!j.contains("rounds") || !j.at("rounds").is_array()) {
        throw ConfigError("detector fixture missing \"rounds\" array: " + path.string());
    }
    auto rounds = std::make_shared<std::vector<std::vector<Candidate>>>();
    for (const auto& round : j.at("rounds")) {
        if (!round.is_array()) {
            throw ConfigError("detector fixture round is not an array: " + path.string());
        }
        std::vector<Candidate> cands;
        for (const auto& c : round) {
            Candidate cand;
            cand.box.x_min = coord_field(c, "x_min", path);
            cand.box.y_min = coord_field(c, "y_min", path);
            cand.box.x_max = coord_field(c, "x_max", path);
            cand.box.y_max = coord_field(c, "y_max", path);
            cand.box_score = score_field(c, "box_score", path);
            cand.text_score = score_field(c, "text_score", path);
            if (!box_valid(cand.box)) {
                throw ConfigError("invalid box in detector fixture: " + path.string());
            }
            cands.push_back(cand);
        }
        rounds->push_back(std::move(cands));
    }
    return rounds;
}

std::shared_ptr<const std::vector<std::string>>
load_verifier_script(const std::filesystem::path& path) {
    const json j = parse_json_file(path);
    if (!j.contains("answers") || !j.at("answers").is_array() || j.at("answers").empty()) {
        throw ConfigError("verifier fixture needs a non-empty \"answers\" array: " + path.string());
    }
    auto answers = std::make_shared<std::vector<std::string>>();
    for (const auto& a : j.at("answers")) {
        if (!a.is_string() || a.get<std::string>().empty()) {
            throw ConfigError("verifier fixture answers must be non-empty strings: " +
                              path.string());
        }
        answers->push_back(a.get<std::string>());
    }
    return answers;
}

std::shared_ptr<const std::vector<LabelMask>>
load_segmenter_script(const std::filesystem::path& path, const Taxonomy& taxonomy) {
    const json j = parse_json_file(path);
    if (!j.contains("masks") || !j.at("masks").is_array() || j.at("masks").empty()) {
        throw ConfigError("segmenter fixture needs a non-empty \"masks\" array: " + path.string());
    }
    if (j.contains("taxonomy") && j.at("taxonomy").get<std::string>() != taxonomy.name()) {
        throw ConfigError("segmenter fixture taxonomy \"" +
                          j.at("taxonomy").get<std::string>() + "\" does not match \"" +
                          taxonomy.name() + "\": " + path.string());
    }
    auto masks = std::make_shared<std::vector<LabelMask>>();
    const auto base = path.parent_path();
    for (const auto& m : j.at("masks")) {
        if (!m.is_string()) {
            throw ConfigError("segmenter fixture mask entries must be paths: " + path.string());
        }
        std::filesystem::path mask_path = m.get<std::string>();
        if (mask_path.is_relative()) {
            mask_path = base / mask_path;
        }
        LabelMask mask = read_mask_png(mask_path).mask;
        if (!mask.valid_for(taxonomy)) {
            throw ConfigError("fixture mask " + mask_path.string() +
                              " contains labels outside taxonomy " + taxonomy.name());
        }
        masks->push_back(std::move(mask));
    }
    return masks;
}

std::string resolve_tray_template(const std::string& path, const std::string& tray_id) {
    static const std::string token = "{tray_id}";
    std::string out = path;
    std::size_t pos = 0;
    while ((pos = out.find(token, pos)) != std::string::npos) {
        out.replace(pos, token.size(), tray_id);
        pos += tray_id.size();
    }
    return out;
}

// Loaded-fixture cache keyed by resolved file path; shared across the
// copies of one BackendSet and safe under concurrent tray workers.
struct BackendSet::Cache {
    std::mutex mutex;
    std::map<std::string, std::shared_ptr<const std::vector<std::vector<Candidate>>>> detector;
    std::map<std::string, std::shared_ptr<const std::vector<std::string>>> verifier;
    std::map<std::string, std::shared_ptr<const std::vector<LabelMask>>> segmenter;

    template <typename MapT, typename LoadFn>
    auto get(MapT& map, const std::string& path, LoadFn&& load) {
        std::lock_guard<std::mutex> lock(mutex);
        auto it = map.find(path);
        if (it == map.end()) {
            it = map.emplace(path, load()).first;
        }
        return it->second;
    }
};

BackendSet BackendSet::from_specs(const BackendSpec& detector, const BackendSpec& verifier,
                                  const BackendSpec& segmenter, const Taxonomy& taxonomy) {
    auto check = [](const BackendSpec& s, const char* role) {
        if (s.kind != "scripted" && s.kind != "reference") {
            throw ConfigError(std::string(role) + " backend kind must be \"scripted\" or "
                              "\"reference\", got \"" + s.kind + "\"");
        }
        if (s.kind == "scripted" && s.script.empty()) {
            throw ConfigError(std::string(role) + ": scripted backend needs a \"script\" path");
        }
        if (s.kind == "reference" && s.endpoint.empty()) {
            throw ConfigError(std::string(role) + ": reference backend needs an \"endpoint\" URL");
        }
    };
    check(detector, "detector");
    check(verifier, "verifier");
    check(segmenter, "segmenter");

    BackendSet set;
    set.detector_spec_ = detector;
    set.verifier_spec_ = verifier;
    set.segmenter_spec_ = segmenter;
    set.taxonomy_name_ = taxonomy.name();
    set.cache_ = std::make_shared<Cache>();
    return set;
}

std::unique_ptr<DetectorBackend> BackendSet::make_detector(const std::string& tray_id) const {
    if (detector_spec_.kind == "scripted") {
        const std::string path = resolve_tray_template(detector_spec_.script, tray_id);
        auto rounds = cache_->get(cache_->detector, path,
                                  [&] { return load_detector_script(path); });
        return std::make_unique<ScriptedDetector>(std::move(rounds));
    }
    return std::make_unique<HttpDetector>(detector_spec_.endpoint);
}

std::unique_ptr<VerifierBackend> BackendSet::make_verifier(const std::string& tray_id) const {
    if (verifier_spec_.kind == "scripted") {
        const std::string path = resolve_tray_template(verifier_spec_.script, tray_id);
        auto answers = cache_->get(cache_->verifier, path,
                                   [&] { return load_verifier_script(path); });
        return std::make_unique<ScriptedVerifier>(std::move(answers));
    }
    return std::make_unique<HttpVerifier>(verifier_spec_.endpoint);
}

std::unique_ptr<SegmenterBackend> BackendSet::make_segmenter(const std::string& tray_id) const {
    if (segmenter_spec_.kind == "scripted") {
        const std::string path = resolve_tray_template(segmenter_spec_.script, tray_id);
        const Taxonomy taxonomy = Taxonomy::named(taxonomy_name_);
        auto masks = cache_->get(cache_->segmenter, path,
                                 [&] { return load_segmenter_script(path, taxonomy); });
        return std::make_unique<ScriptedSegmenter>(std::move(masks), taxonomy_name_);
    }
    return std::make_unique<HttpSegmenter>(segmenter_spec_.endpoint);
}

} // namespace traypipe
