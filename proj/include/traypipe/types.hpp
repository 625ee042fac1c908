#pragma once

#include "traypipe/geometry.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace traypipe {

/// 8-bit RGB color.
struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// One retained detection: a box, its two scores, and the loop round
/// (0-based) that produced it.
struct Detection {
    BBox box;
    double box_score = 0.0;
    double text_score = 0.0;
    int iteration = 0;
};

struct TaxonomyClass {
    int id = 0;
    std::string name;
};

/// Ordered class list for segmentation. Class id 0 is always background;
/// ids are contiguous.
class Taxonomy {
public:
    /// "beetle5": background, head, pronotum, elytra, legs, antennas.
    /// "beetle9": the beetle5 set plus eyes, mouthparts, tail, pin.
    /// Any other name throws ConfigError.
    static Taxonomy named(const std::string& name);

    const std::string& name() const { return name_; }
    const std::vector<TaxonomyClass>& classes() const { return classes_; }
    int background_id() const { return 0; }
    int size() const { return static_cast<int>(classes_.size()); }

    bool valid_label(int id) const { return id >= 0 && id < size(); }
    std::optional<int> id_of(std::string_view class_name) const;
    const std::string& name_of(int id) const;

private:
    Taxonomy(std::string name, std::vector<std::string> class_names);

    std::string name_;
    std::vector<TaxonomyClass> classes_;
};

/// Row-major grid of class ids.
struct LabelMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;

    static LabelMask filled(int width, int height, std::uint8_t value = 0);

    std::uint8_t at(int x, int y) const {
        return labels[static_cast<std::size_t>(y) * width + x];
    }
    std::uint8_t& at(int x, int y) {
        return labels[static_cast<std::size_t>(y) * width + x];
    }
    std::size_t pixel_count() const { return labels.size(); }

    /// Dimensions consistent and every label a valid class id.
    bool valid_for(const Taxonomy& taxonomy) const;

    friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// One metadata row. Columns are carried through verbatim, in their
/// original order; no schema is imposed.
struct MetadataRecord {
    std::vector<std::pair<std::string, std::string>> fields;

    friend bool operator==(const MetadataRecord&, const MetadataRecord&) = default;
};

struct TrayRecord {
    std::string tray_id;
    std::string image_path;
    std::optional<long long> ground_truth_count;
    std::vector<MetadataRecord> metadata_rows;
};

/// Checks that all metadata rows share one key set and order, and that
/// ground_truth_count (when present alongside rows) agrees with the row
/// count. Throws InputError.
void validate_tray_record(const TrayRecord& tray);

} // namespace traypipe
