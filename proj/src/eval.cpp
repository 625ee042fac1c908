#include "traypipe/eval.hpp"

#include "traypipe/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <iomanip>

namespace traypipe {

CountReport count_accuracy(const std::vector<CountRow>& trays) {
    if (trays.empty()) {
        throw InputError("count accuracy needs at least one tray");
    }
    CountReport report;
    report.rows = trays;
    for (const auto& row : trays) {
        if (row.detected < 0 || row.ground_truth < 0) {
            throw InputError("counts must be >= 0 (tray " + row.tray_id + ")");
        }
        ++report.total_trays;
        if (row.detected == row.ground_truth) {
            ++report.exact_matches;
        } else if (row.detected > row.ground_truth) {
            ++report.over_count_trays;
        } else {
            ++report.under_count_trays;
        }
    }
    return report;
}

std::optional<double> class_iou(const LabelMask& pred, const LabelMask& gt, int class_id) {
    if (pred.width != gt.width || pred.height != gt.height ||
        pred.labels.size() != gt.labels.size()) {
        throw InputError("mask dimensions differ");
    }
    if (class_id < 0 || class_id > 255) {
        throw InputError("class id out of range");
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool p = pred.labels[i] == class_id;
        const bool g = gt.labels[i] == class_id;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) {
        return std::nullopt;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

ImageRow image_miou(const LabelMask& pred, const LabelMask& gt, const Taxonomy& taxonomy,
                    bool absent_as_one) {
    if (!pred.valid_for(taxonomy) || !gt.valid_for(taxonomy)) {
        throw InputError("mask labels do not match taxonomy " + taxonomy.name());
    }
    ImageRow row;
    row.per_class.resize(static_cast<std::size_t>(taxonomy.size()));
    double sum = 0.0;
    int applicable = 0;
    for (int id = 0; id < taxonomy.size(); ++id) {
        if (id == taxonomy.background_id()) {
            continue;
        }
        std::optional<double> iou = class_iou(pred, gt, id);
        if (!iou && absent_as_one) {
            iou = 1.0;
        }
        row.per_class[static_cast<std::size_t>(id)] = iou;
        if (iou) {
            sum += *iou;
            ++applicable;
        }
    }
    if (applicable > 0) {
        row.miou = sum / applicable;
    }
    return row;
}

SegReport dataset_report(const std::vector<SegPair>& pairs, const Taxonomy& taxonomy,
                         bool absent_as_one) {
    if (pairs.empty()) {
        throw InputError("segmentation report needs at least one mask pair");
    }
    SegReport report;
    report.taxonomy_name = taxonomy.name();
    report.absent_as_one = absent_as_one;
    report.dataset_class_iou.resize(static_cast<std::size_t>(taxonomy.size()));

    std::vector<double> class_sum(static_cast<std::size_t>(taxonomy.size()), 0.0);
    std::vector<int> class_n(static_cast<std::size_t>(taxonomy.size()), 0);
    double miou_sum = 0.0;
    int miou_n = 0;

    for (const auto& pair : pairs) {
        ImageRow row = image_miou(pair.pred, pair.gt, taxonomy, absent_as_one);
        row.name = pair.name;
        for (int id = 1; id < taxonomy.size(); ++id) {
            if (const auto& iou = row.per_class[static_cast<std::size_t>(id)]) {
                class_sum[static_cast<std::size_t>(id)] += *iou;
                ++class_n[static_cast<std::size_t>(id)];
            }
        }
        if (row.miou) {
            miou_sum += *row.miou;
            ++miou_n;
        }
        report.images.push_back(std::move(row));
    }
    for (int id = 1; id < taxonomy.size(); ++id) {
        if (class_n[static_cast<std::size_t>(id)] > 0) {
            report.dataset_class_iou[static_cast<std::size_t>(id)] =
                class_sum[static_cast<std::size_t>(id)] / class_n[static_cast<std::size_t>(id)];
        }
    }
    if (miou_n > 0) {
        report.dataset_miou = miou_sum / miou_n;
    }
    return report;
}

std::string format_pct(double fraction) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f%%", fraction * 100.0);
    return buf;
}

nlohmann::ordered_json count_report_json(const CountReport& report) {
    nlohmann::ordered_json j;
    j["total_trays"] = report.total_trays;
    j["exact_matches"] = report.exact_matches;
    j["over_count_trays"] = report.over_count_trays;
    j["under_count_trays"] = report.under_count_trays;
    j["accuracy"] = report.accuracy();
    j["accuracy_display"] = format_pct(report.accuracy());
    auto rows = nlohmann::ordered_json::array();
    for (const auto& row : report.rows) {
        nlohmann::ordered_json r;
        r["tray_id"] = row.tray_id;
        r["detected"] = row.detected;
        r["ground_truth"] = row.ground_truth;
        r["delta"] = row.delta();
        rows.push_back(std::move(r));
    }
    j["trays"] = std::move(rows);
    return j;
}

nlohmann::ordered_json seg_report_json(const SegReport& report, const Taxonomy& taxonomy) {
    auto class_row = [&](const std::vector<std::optional<double>>& per_class) {
        nlohmann::ordered_json obj;
        for (int id = 1; id < taxonomy.size(); ++id) {
            const auto& iou = per_class[static_cast<std::size_t>(id)];
            if (iou) {
                obj[taxonomy.name_of(id)] = *iou;
            } else {
                obj[taxonomy.name_of(id)] = nullptr;
            }
        }
        return obj;
    };

    nlohmann::ordered_json j;
    j["taxonomy"] = report.taxonomy_name;
    j["absent_as_one"] = report.absent_as_one;
    j["dataset_miou"] =
        report.dataset_miou ? nlohmann::ordered_json(*report.dataset_miou) : nullptr;
    j["dataset_miou_display"] =
        report.dataset_miou ? nlohmann::ordered_json(format_pct(*report.dataset_miou)) : nullptr;
    j["dataset_class_iou"] = class_row(report.dataset_class_iou);
    auto images = nlohmann::ordered_json::array();
    for (const auto& row : report.images) {
        nlohmann::ordered_json r;
        r["name"] = row.name;
        r["miou"] = row.miou ? nlohmann::ordered_json(*row.miou) : nullptr;
        r["class_iou"] = class_row(row.per_class);
        images.push_back(std::move(r));
    }
    j["images"] = std::move(images);
    return j;
}

std::string count_report_text(const CountReport& report) {
    std::ostringstream out;
    out << "Count accuracy report\n";
    out << "  trays:         " << report.total_trays << "\n";
    out << "  exact matches: " << report.exact_matches << "\n";
    out << "  over-counts:   " << report.over_count_trays << "\n";
    out << "  under-counts:  " << report.under_count_trays << "\n";
    out << "  accuracy:      " << format_pct(report.accuracy()) << "\n";
    return out.str();
}

std::string seg_report_text(const SegReport& report, const Taxonomy& taxonomy) {
    const std::string na = "n/a";
    auto cell = [&](const std::optional<double>& iou) {
        return iou ? format_pct(*iou) : na;
    };

    std::vector<std::string> headers = {"image"};
    for (int id = 1; id < taxonomy.size(); ++id) {
        headers.push_back(taxonomy.name_of(id));
    }
    headers.push_back("mIoU");

    std::vector<std::vector<std::string>> lines;
    for (const auto& row : report.images) {
        std::vector<std::string> line = {row.name};
        for (int id = 1; id < taxonomy.size(); ++id) {
            line.push_back(cell(row.per_class[static_cast<std::size_t>(id)]));
        }
        line.push_back(cell(row.miou));
        lines.push_back(std::move(line));
    }
    std::vector<std::string> dataset = {"dataset"};
    for (int id = 1; id < taxonomy.size(); ++id) {
        dataset.push_back(cell(report.dataset_class_iou[static_cast<std::size_t>(id)]));
    }
    dataset.push_back(cell(report.dataset_miou));
    lines.push_back(std::move(dataset));

    std::vector<std::size_t> widths(headers.size());
    for (std::size_t c = 0; c < headers.size(); ++c) {
        widths[c] = headers[c].size();
        for (const auto& line : lines) {
            widths[c] = std::max(widths[c], line[c].size());
        }
    }

    std::ostringstream out;
    out << "Segmentation report (taxonomy " << report.taxonomy_name;
    if (report.absent_as_one) {
        out << ", absent-in-both scored 1.0";
    }
    out << ")\n";
    auto emit = [&](const std::vector<std::string>& line) {
        for (std::size_t c = 0; c < line.size(); ++c) {
            out << (c == 0 ? "  " : "  ") << std::left << std::setw(static_cast<int>(widths[c]))
                << line[c];
        }
        out << "\n";
    };
    emit(headers);
    for (const auto& line : lines) {
        emit(line);
    }
    return out.str();
}

} // namespace traypipe
