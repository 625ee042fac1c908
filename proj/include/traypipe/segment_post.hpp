#pragma once

#include "traypipe/backends.hpp"
#include "traypipe/types.hpp"

#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace traypipe {

/// class_id -> RGB, indexed by id. Background must map to (0,0,0) and the
/// mapping must be injective so colorized masks decode back to labels.
using Palette = std::vector<Rgb>;

/// The documented default palette for a taxonomy: background black, then
/// head (230,25,75), pronotum (60,180,75), elytra (0,130,200), legs
/// (245,130,48), antennas (145,30,180), eyes (255,225,25), mouthparts
/// (70,240,240), tail (240,50,230), pin (128,128,128).
Palette default_palette(const Taxonomy& taxonomy);

struct SegmentationConfig {
    std::string taxonomy_name = "beetle5";
    int model_width = 512;
    int model_height = 512;
    double overlay_alpha = 0.5;
    Palette palette; // empty -> default_palette(taxonomy)
    std::vector<std::string> required_classes = {"head", "pronotum", "elytra"};

    /// Throws ConfigError on an incomplete or non-injective palette, a
    /// non-black background entry, alpha outside [0,1], or a required
    /// class the taxonomy does not know.
    void validate(const Taxonomy& taxonomy) const;

    Palette effective_palette(const Taxonomy& taxonomy) const;
};

/// Runs the segmenter on one crop: the crop is resized to the model
/// resolution (bilinear, aspect ratio not preserved), the backend is
/// invoked, and the mask is resized back to the crop's resolution with
/// nearest-neighbor label interpolation. A backend mask of the wrong
/// shape or with labels outside the taxonomy is a StageError.
LabelMask segment_crop(const cv::Mat& crop_rgb, SegmenterBackend& backend,
                       const Taxonomy& taxonomy, const SegmentationConfig& config);

/// Pixel-wise palette lookup. Labels without a palette entry -> ConfigError.
cv::Mat colorize_mask(const LabelMask& mask, const Palette& palette);

/// Inverse of colorize_mask for an injective palette. Pixels whose color
/// is not in the palette -> InputError.
LabelMask decode_colorized(const cv::Mat& image_rgb, const Palette& palette);

/// Background pixels unchanged; foreground blended per channel as
/// round((1-alpha)*image + alpha*class color).
cv::Mat overlay_mask(const cv::Mat& image_rgb, const LabelMask& mask, const Palette& palette,
                     double alpha);

/// Tight crop around every pixel of class_id, grown by padding, clamped.
/// Absent class -> nullopt. Background is not a part: class_id 0 is an
/// InputError.
std::optional<cv::Mat> crop_part(const cv::Mat& image_rgb, const LabelMask& mask, int class_id,
                                 int padding);

/// Required classes (config) that have zero pixels in the mask, in
/// taxonomy order. Empty result means the specimen looks intact.
std::vector<std::string> completeness_check(const LabelMask& mask, const Taxonomy& taxonomy,
                                            const SegmentationConfig& config);

} // namespace traypipe
