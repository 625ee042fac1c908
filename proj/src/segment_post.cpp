#include "traypipe/segment_post.hpp"

#include "traypipe/errors.hpp"
#include "traypipe/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>

#include <opencv2/imgproc.hpp>

namespace traypipe {

namespace {

constexpr std::array<Rgb, 10> kDefaultColors = {{
    {0, 0, 0},       // background
    {230, 25, 75},   // head
    {60, 180, 75},   // pronotum
    {0, 130, 200},   // elytra
    {245, 130, 48},  // legs
    {145, 30, 180},  // antennas
    {255, 225, 25},  // eyes
    {70, 240, 240},  // mouthparts
    {240, 50, 230},  // tail
    {128, 128, 128}, // pin
}};

void require_same_shape(const cv::Mat& image, const LabelMask& mask, const char* op) {
    if (image.empty() || image.type() != CV_8UC3) {
        throw InputError(std::string(op) + " expects a non-empty 8-bit RGB image");
    }
    if (image.cols != mask.width || image.rows != mask.height ||
        mask.labels.size() != static_cast<std::size_t>(mask.width) * mask.height) {
        throw InputError(std::string(op) + ": image and mask dimensions differ");
    }
}

} // namespace

Palette default_palette(const Taxonomy& taxonomy) {
    if (taxonomy.size() > static_cast<int>(kDefaultColors.size())) {
        throw ConfigError("no default palette for " + std::to_string(taxonomy.size()) +
                          " classes");
    }
    return Palette(kDefaultColors.begin(), kDefaultColors.begin() + taxonomy.size());
}

void SegmentationConfig::validate(const Taxonomy& taxonomy) const {
    if (taxonomy.name() != taxonomy_name) {
        throw ConfigError("segmentation config is for taxonomy " + taxonomy_name +
                          ", got " + taxonomy.name());
    }
    if (model_width <= 0 || model_height <= 0) {
        throw ConfigError("model resolution must be positive");
    }
    if (overlay_alpha < 0.0 || overlay_alpha > 1.0) {
        throw ConfigError("overlay_alpha must lie in [0,1]");
    }
    const Palette pal = effective_palette(taxonomy);
    if (static_cast<int>(pal.size()) < taxonomy.size()) {
        throw ConfigError("palette does not cover every taxonomy class");
    }
    if (!(pal[0] == Rgb{0, 0, 0})) {
        throw ConfigError("palette background entry must be (0,0,0)");
    }
    std::set<std::array<std::uint8_t, 3>> distinct;
    for (const auto& c : pal) {
        if (!distinct.insert({c.r, c.g, c.b}).second) {
            throw ConfigError("palette colors must be distinct");
        }
    }
    for (const auto& name : required_classes) {
        const auto id = taxonomy.id_of(name);
        if (!id) {
            throw ConfigError("required class \"" + name + "\" not in taxonomy " +
                              taxonomy.name());
        }
        if (*id == taxonomy.background_id()) {
            throw ConfigError("background cannot be a required class");
        }
    }
}

Palette SegmentationConfig::effective_palette(const Taxonomy& taxonomy) const {
    return palette.empty() ? default_palette(taxonomy) : palette;
}

LabelMask segment_crop(const cv::Mat& crop_rgb, SegmenterBackend& backend,
                       const Taxonomy& taxonomy, const SegmentationConfig& config) {
    if (crop_rgb.empty() || crop_rgb.type() != CV_8UC3) {
        throw InputError("segment_crop expects a non-empty 8-bit RGB crop");
    }
    cv::Mat resized;
    cv::resize(crop_rgb, resized, cv::Size(config.model_width, config.model_height), 0.0, 0.0,
               cv::INTER_LINEAR);

    LabelMask model_mask = backend.segment(resized, taxonomy);
    if (model_mask.width != config.model_width || model_mask.height != config.model_height ||
        model_mask.labels.size() !=
            static_cast<std::size_t>(model_mask.width) * model_mask.height) {
        throw StageError("segmenter returned a " + std::to_string(model_mask.width) + "x" +
                         std::to_string(model_mask.height) + " mask, expected " +
                         std::to_string(config.model_width) + "x" +
                         std::to_string(config.model_height));
    }
    if (!model_mask.valid_for(taxonomy)) {
        throw StageError("segmenter mask contains labels outside taxonomy " + taxonomy.name());
    }

    const cv::Mat model_view(model_mask.height, model_mask.width, CV_8UC1,
                             model_mask.labels.data());
    cv::Mat native;
    cv::resize(model_view, native, cv::Size(crop_rgb.cols, crop_rgb.rows), 0.0, 0.0,
               cv::INTER_NEAREST);

    LabelMask out;
    out.width = crop_rgb.cols;
    out.height = crop_rgb.rows;
    out.labels.resize(static_cast<std::size_t>(out.width) * out.height);
    for (int y = 0; y < out.height; ++y) {
        const auto* row = native.ptr<std::uint8_t>(y);
        std::copy(row, row + out.width, out.labels.data() + static_cast<std::size_t>(y) * out.width);
    }
    return out;
}

cv::Mat colorize_mask(const LabelMask& mask, const Palette& palette) {
    if (mask.width <= 0 || mask.height <= 0 ||
        mask.labels.size() != static_cast<std::size_t>(mask.width) * mask.height) {
        throw InputError("malformed mask");
    }
    for (std::uint8_t v : mask.labels) {
        if (v >= palette.size()) {
            throw ConfigError("label " + std::to_string(v) + " missing from palette");
        }
    }
    cv::Mat out(mask.height, mask.width, CV_8UC3);
    for (int y = 0; y < mask.height; ++y) {
        auto* row = out.ptr<cv::Vec3b>(y);
        for (int x = 0; x < mask.width; ++x) {
            const Rgb& c = palette[mask.at(x, y)];
            row[x] = cv::Vec3b(c.r, c.g, c.b);
        }
    }
    return out;
}

LabelMask decode_colorized(const cv::Mat& image_rgb, const Palette& palette) {
    if (image_rgb.empty() || image_rgb.type() != CV_8UC3) {
        throw InputError("decode_colorized expects a non-empty 8-bit RGB image");
    }
    std::map<std::array<std::uint8_t, 3>, std::uint8_t> inverse;
    for (std::size_t id = 0; id < palette.size(); ++id) {
        const auto& c = palette[id];
        if (!inverse.emplace(std::array<std::uint8_t, 3>{c.r, c.g, c.b},
                             static_cast<std::uint8_t>(id))
                 .second) {
            throw ConfigError("palette is not injective, cannot decode");
        }
    }
    LabelMask mask;
    mask.width = image_rgb.cols;
    mask.height = image_rgb.rows;
    mask.labels.resize(static_cast<std::size_t>(mask.width) * mask.height);
    for (int y = 0; y < mask.height; ++y) {
        const auto* row = image_rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < mask.width; ++x) {
            const auto it = inverse.find({row[x][0], row[x][1], row[x][2]});
            if (it == inverse.end()) {
                throw InputError("pixel color not in palette at (" + std::to_string(x) + "," +
                                 std::to_string(y) + ")");
            }
            mask.at(x, y) = it->second;
        }
    }
    return mask;
}

cv::Mat overlay_mask(const cv::Mat& image_rgb, const LabelMask& mask, const Palette& palette,
                     double alpha) {
    require_same_shape(image_rgb, mask, "overlay_mask");
    if (alpha < 0.0 || alpha > 1.0) {
        throw InputError("alpha must lie in [0,1]");
    }
    for (std::uint8_t v : mask.labels) {
        if (v >= palette.size()) {
            throw ConfigError("label " + std::to_string(v) + " missing from palette");
        }
    }
    cv::Mat out = image_rgb.clone();
    for (int y = 0; y < mask.height; ++y) {
        auto* row = out.ptr<cv::Vec3b>(y);
        for (int x = 0; x < mask.width; ++x) {
            const std::uint8_t label = mask.at(x, y);
            if (label == 0) {
                continue;
            }
            const Rgb& c = palette[label];
            const std::uint8_t color[3] = {c.r, c.g, c.b};
            for (int ch = 0; ch < 3; ++ch) {
                const double blended = (1.0 - alpha) * row[x][ch] + alpha * color[ch];
                row[x][ch] = static_cast<std::uint8_t>(std::lround(blended));
            }
        }
    }
    return out;
}

std::optional<cv::Mat> crop_part(const cv::Mat& image_rgb, const LabelMask& mask, int class_id,
                                 int padding) {
    require_same_shape(image_rgb, mask, "crop_part");
    if (class_id == 0) {
        throw InputError("background is not a part");
    }
    if (class_id < 0 || class_id > 255) {
        throw InputError("class id out of range");
    }
    if (padding < 0) {
        throw InputError("padding must be >= 0");
    }
    int min_x = mask.width, min_y = mask.height, max_x = -1, max_y = -1;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y) == class_id) {
                min_x = std::min(min_x, x);
                min_y = std::min(min_y, y);
                max_x = std::max(max_x, x);
                max_y = std::max(max_y, y);
            }
        }
    }
    if (max_x < 0) {
        return std::nullopt;
    }
    const PixelRect r = expand_and_clamp(PixelRect{min_x, min_y, max_x + 1, max_y + 1}, padding,
                                         mask.width, mask.height);
    return image_rgb(cv::Rect(r.x, r.y, r.width(), r.height())).clone();
}

std::vector<std::string> completeness_check(const LabelMask& mask, const Taxonomy& taxonomy,
                                            const SegmentationConfig& config) {
    config.validate(taxonomy);
    if (!mask.valid_for(taxonomy)) {
        throw InputError("mask labels do not match taxonomy " + taxonomy.name());
    }
    std::array<bool, 256> present{};
    for (std::uint8_t v : mask.labels) {
        present[v] = true;
    }
    const std::set<std::string> required(config.required_classes.begin(),
                                         config.required_classes.end());
    std::vector<std::string> missing;
    for (const auto& cls : taxonomy.classes()) {
        if (required.count(cls.name) && !present[static_cast<std::size_t>(cls.id)]) {
            missing.push_back(cls.name);
        }
    }
    return missing;
}

} // namespace traypipe
