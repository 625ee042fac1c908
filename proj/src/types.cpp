#include "traypipe/types.hpp"

#include "traypipe/errors.hpp"

namespace traypipe {

Taxonomy::Taxonomy(std::string name, std::vector<std::string> class_names) : name_(std::move(name)) {
    classes_.reserve(class_names.size());
    int id = 0;
    for (auto& cn : class_names) {
        classes_.push_back(TaxonomyClass{id++, std::move(cn)});
    }
}

Taxonomy Taxonomy::named(const std::string& name) {
    if (name == "beetle5") {
        return Taxonomy(name, {"background", "head", "pronotum", "elytra", "legs", "antennas"});
    }
    if (name == "beetle9") {
        return Taxonomy(name, {"background", "head", "pronotum", "elytra", "legs", "antennas",
                               "eyes", "mouthparts", "tail", "pin"});
    }
    throw ConfigError("unknown taxonomy: \"" + name + "\" (expected beetle5 or beetle9)");
}

std::optional<int> Taxonomy::id_of(std::string_view class_name) const {
    for (const auto& c : classes_) {
        if (c.name == class_name) {
            return c.id;
        }
    }
    return std::nullopt;
}

const std::string& Taxonomy::name_of(int id) const {
    if (!valid_label(id)) {
        throw InputError("class id " + std::to_string(id) + " not in taxonomy " + name_);
    }
    return classes_[static_cast<std::size_t>(id)].name;
}

LabelMask LabelMask::filled(int width, int height, std::uint8_t value) {
    if (width <= 0 || height <= 0) {
        throw InputError("mask dimensions must be positive");
    }
    LabelMask m;
    m.width = width;
    m.height = height;
    m.labels.assign(static_cast<std::size_t>(width) * height, value);
    return m;
}

bool LabelMask::valid_for(const Taxonomy& taxonomy) const {
    if (width <= 0 || height <= 0 ||
        labels.size() != static_cast<std::size_t>(width) * height) {
        return false;
    }
    for (std::uint8_t v : labels) {
        if (!taxonomy.valid_label(v)) {
            return false;
        }
    }
    return true;
}

void validate_tray_record(const TrayRecord& tray) {
    if (!tray.metadata_rows.empty()) {
        const auto& first = tray.metadata_rows.front().fields;
        for (std::size_t i = 1; i < tray.metadata_rows.size(); ++i) {
            const auto& fields = tray.metadata_rows[i].fields;
            if (fields.size() != first.size()) {
                throw InputError("tray " + tray.tray_id + ": metadata row " + std::to_string(i) +
                                 " has a different column count");
            }
            for (std::size_t k = 0; k < fields.size(); ++k) {
                if (fields[k].first != first[k].first) {
                    throw InputError("tray " + tray.tray_id + ": metadata row " + std::to_string(i) +
                                     " has a different key order");
                }
            }
        }
        if (tray.ground_truth_count &&
            *tray.ground_truth_count != static_cast<long long>(tray.metadata_rows.size())) {
            throw InputError("tray " + tray.tray_id + ": ground-truth count " +
                             std::to_string(*tray.ground_truth_count) + " disagrees with " +
                             std::to_string(tray.metadata_rows.size()) + " metadata rows");
        }
    }
    if (tray.ground_truth_count && *tray.ground_truth_count < 0) {
        throw InputError("tray " + tray.tray_id + ": negative ground-truth count");
    }
}

} // namespace traypipe
