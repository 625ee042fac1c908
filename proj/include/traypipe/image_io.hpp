#pragma once

#include "traypipe/types.hpp"

#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>

namespace traypipe {

/// Loads an image as 8-bit, 3-channel RGB. Throws IoError when the file
/// cannot be read or decoded.
cv::Mat load_image_rgb(const std::filesystem::path& path);

/// Writes an 8-bit RGB image; format follows the file extension.
/// Parent directories are created as needed.
void save_image_rgb(const std::filesystem::path& path, const cv::Mat& image_rgb);

/// Mask file format: PNG with an indexed palette, 8-bit depth, where the
/// palette index of each pixel IS the class id. Decoding reads the raw
/// indices back, so labels round-trip bit-exact; the palette colors make
/// the file double as the colorized mask when viewed.
void write_mask_png(const std::filesystem::path& path, const LabelMask& mask,
                    const std::vector<Rgb>& palette);

struct MaskFile {
    LabelMask mask;
    std::vector<Rgb> palette;
};

/// Reads an indexed-palette mask file. Non-palette PNGs -> ConfigError.
MaskFile read_mask_png(const std::filesystem::path& path);

} // namespace traypipe
