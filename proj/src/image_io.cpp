#include "traypipe/image_io.hpp"

#include "traypipe/errors.hpp"

#include <cstdio>
#include <memory>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <png.h>

namespace traypipe {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) {
            std::fclose(f);
        }
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

void ensure_parent_dir(const std::filesystem::path& path) {
    const auto parent = path.parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
}

// RAII owners for libpng handles, so error paths (longjmp -> throw) clean
// up during unwinding instead of via manual destroy calls.
struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;

    PngWriter() {
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!png) {
            throw IoError("png_create_write_struct failed");
        }
        info = png_create_info_struct(png);
        if (!info) {
            png_destroy_write_struct(&png, nullptr);
            png = nullptr;
            throw IoError("png_create_info_struct failed");
        }
    }
    ~PngWriter() {
        if (png) {
            png_destroy_write_struct(&png, &info);
        }
    }
    PngWriter(const PngWriter&) = delete;
    PngWriter& operator=(const PngWriter&) = delete;
};

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;

    PngReader() {
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!png) {
            throw IoError("png_create_read_struct failed");
        }
        info = png_create_info_struct(png);
        if (!info) {
            png_destroy_read_struct(&png, nullptr, nullptr);
            png = nullptr;
            throw IoError("png_create_info_struct failed");
        }
    }
    ~PngReader() {
        if (png) {
            png_destroy_read_struct(&png, &info, nullptr);
        }
    }
    PngReader(const PngReader&) = delete;
    PngReader& operator=(const PngReader&) = delete;
};

// Row loops live outside the setjmp frames so no local in those frames is
// modified between setjmp and a potential longjmp. GCC still reports a
// spurious -Wclobbered inside inlined vector code (silenced for this file in
// the build); the buffer is fully written before any libpng call that could
// longjmp, and abandoned frames are never resumed.
#if defined(__GNUC__)
__attribute__((noinline))
#endif
void write_rows(png_structp png, const LabelMask& mask) {
    for (int y = 0; y < mask.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(mask.labels.data() +
                                                 static_cast<std::size_t>(y) * mask.width));
    }
}

#if defined(__GNUC__)
__attribute__((noinline))
#endif
void read_rows(png_structp png, LabelMask& mask) {
    mask.labels.assign(static_cast<std::size_t>(mask.width) * mask.height, 0);
    for (int y = 0; y < mask.height; ++y) {
        png_read_row(png, mask.labels.data() + static_cast<std::size_t>(y) * mask.width,
                     nullptr);
    }
}

} // namespace

cv::Mat load_image_rgb(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot read image: " + path.string());
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

void save_image_rgb(const std::filesystem::path& path, const cv::Mat& image_rgb) {
    if (image_rgb.empty() || image_rgb.type() != CV_8UC3) {
        throw InputError("save_image_rgb expects a non-empty 8-bit RGB image");
    }
    ensure_parent_dir(path);
    cv::Mat bgr;
    cv::cvtColor(image_rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr)) {
        throw IoError("cannot write image: " + path.string());
    }
}

void write_mask_png(const std::filesystem::path& path, const LabelMask& mask,
                    const std::vector<Rgb>& palette) {
    if (mask.width <= 0 || mask.height <= 0 ||
        mask.labels.size() != static_cast<std::size_t>(mask.width) * mask.height) {
        throw InputError("malformed mask");
    }
    if (palette.empty() || palette.size() > 256) {
        throw ConfigError("palette must have 1..256 entries");
    }
    for (std::uint8_t v : mask.labels) {
        if (v >= palette.size()) {
            throw InputError("mask label " + std::to_string(v) + " outside palette of " +
                             std::to_string(palette.size()) + " entries");
        }
    }

    ensure_parent_dir(path);
    FileHandle fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) {
        throw IoError("cannot open for writing: " + path.string());
    }

    std::vector<png_color> plte(palette.size());
    for (std::size_t i = 0; i < palette.size(); ++i) {
        plte[i] = png_color{palette[i].r, palette[i].g, palette[i].b};
    }

    PngWriter ctx;
    if (setjmp(png_jmpbuf(ctx.png))) {
        throw IoError("PNG write failed: " + path.string());
    }

    png_init_io(ctx.png, fp.get());
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(mask.width),
                 static_cast<png_uint_32>(mask.height), 8, PNG_COLOR_TYPE_PALETTE,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_PLTE(ctx.png, ctx.info, plte.data(), static_cast<int>(plte.size()));
    png_write_info(ctx.png, ctx.info);
    write_rows(ctx.png, mask);
    png_write_end(ctx.png, nullptr);
}

MaskFile read_mask_png(const std::filesystem::path& path) {
    FileHandle fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) {
        throw IoError("cannot open mask file: " + path.string());
    }

    MaskFile out;
    PngReader ctx;
    if (setjmp(png_jmpbuf(ctx.png))) {
        throw IoError("PNG read failed: " + path.string());
    }

    png_init_io(ctx.png, fp.get());
    png_read_info(ctx.png, ctx.info);

    if (png_get_color_type(ctx.png, ctx.info) != PNG_COLOR_TYPE_PALETTE ||
        png_get_interlace_type(ctx.png, ctx.info) != PNG_INTERLACE_NONE) {
        throw ConfigError("not a non-interlaced indexed-palette mask file: " + path.string());
    }

    if (png_get_bit_depth(ctx.png, ctx.info) < 8) {
        png_set_packing(ctx.png); // one byte per index
    }
    png_read_update_info(ctx.png, ctx.info);

    out.mask.width = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
    out.mask.height = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
    read_rows(ctx.png, out.mask);

    png_colorp plte = nullptr;
    int plte_count = 0;
    png_get_PLTE(ctx.png, ctx.info, &plte, &plte_count);
    out.palette.resize(static_cast<std::size_t>(plte_count));
    for (int i = 0; i < plte_count; ++i) {
        out.palette[static_cast<std::size_t>(i)] =
            Rgb{plte[i].red, plte[i].green, plte[i].blue};
    }

    for (std::uint8_t v : out.mask.labels) {
        if (v >= out.palette.size()) {
            throw ConfigError("mask index " + std::to_string(v) + " outside palette in " +
                              path.string());
        }
    }
    return out;
}

} // namespace traypipe
