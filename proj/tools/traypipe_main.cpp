// traypipe: batch pipeline for pinned-beetle tray photographs.
// Subcommands: detect | crop | segment | run-all | evaluate.
// Exit codes: 0 success (flags allowed), 1 usage/config error,
// 2 zero trays succeeded.

#include "traypipe/errors.hpp"
#include "traypipe/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace {

using namespace traypipe;

struct StageCliArgs {
    std::string config_path;
    std::string trays = "*";
    int workers = 0;
    std::string output;
    bool resume = false;
};

void add_stage_options(CLI::App* cmd, StageCliArgs& args) {
    cmd->add_option("--config", args.config_path, "Pipeline config file (JSON)")->required();
    cmd->add_option("--trays", args.trays, "Glob over tray ids (default: all)");
    cmd->add_option("--workers", args.workers, "Parallel tray workers (overrides config)");
    cmd->add_option("--output", args.output, "Output root (overrides config)");
    cmd->add_flag("--resume", args.resume, "Skip trays whose stage is already complete");
}

PipelineConfig effective_config(const StageCliArgs& args) {
    PipelineConfig config = PipelineConfig::load(args.config_path);
    if (args.workers > 0) {
        config.workers = args.workers;
    }
    if (!args.output.empty()) {
        config.output_dir = args.output;
    }
    return config;
}

void print_summary(const StageSummary& s) {
    std::printf("[%s] %d selected: %d done, %d flagged, %d failed, %d already complete, "
                "%d missing prerequisite\n",
                s.stage.c_str(), s.selected, s.done, s.flagged, s.failed, s.skipped_resume,
                s.skipped_prereq);
    for (const auto& msg : s.messages) {
        std::printf("  %s\n", msg.c_str());
    }
}

int finish_stages(const std::vector<StageSummary>& summaries) {
    for (const auto& s : summaries) {
        print_summary(s);
    }
    return summaries.back().succeeded() > 0 ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pinned-beetle tray pipeline: iterative detection, reading-order "
                 "cropping with metadata matching, and segmentation post-processing."};
    app.require_subcommand(1);

    StageCliArgs detect_args;
    auto* detect_cmd = app.add_subcommand("detect", "Stage 1: iterative detection + verification");
    add_stage_options(detect_cmd, detect_args);

    StageCliArgs crop_args;
    auto* crop_cmd = app.add_subcommand("crop", "Stage 2: reading-order crops + metadata CSV");
    add_stage_options(crop_cmd, crop_args);

    StageCliArgs segment_args;
    auto* segment_cmd = app.add_subcommand("segment", "Stage 3: part masks, overlays, defects");
    add_stage_options(segment_cmd, segment_args);

    StageCliArgs all_args;
    auto* all_cmd = app.add_subcommand("run-all", "All three stages in order");
    add_stage_options(all_cmd, all_args);

    auto* eval_cmd = app.add_subcommand("evaluate", "Metric reports (counts or segmentation)");
    std::string eval_mode;
    std::string eval_config;
    std::string eval_counts;
    std::string eval_manifest;
    std::string eval_ground_truth;
    std::string eval_output;
    std::string eval_pred;
    std::string eval_gt;
    std::string eval_taxonomy = "beetle5";
    bool eval_absent_as_one = false;
    eval_cmd->add_option("--mode", eval_mode, "counts | segmentation")
        ->required()
        ->check(CLI::IsMember({"counts", "segmentation"}));
    eval_cmd->add_option("--config", eval_config, "Pipeline config file (JSON)");
    eval_cmd->add_option("--counts", eval_counts,
                         "Counts CSV (tray_id, detected_count, ground_truth_count)");
    eval_cmd->add_option("--manifest", eval_manifest, "Run manifest to read detected counts from");
    eval_cmd->add_option("--ground-truth", eval_ground_truth,
                         "Ground-truth CSV (tray_id, ground_truth_count)");
    eval_cmd->add_option("--output", eval_output, "Output root; reports land in <output>/reports");
    eval_cmd->add_option("--pred", eval_pred, "Directory of predicted mask files");
    eval_cmd->add_option("--gt", eval_gt, "Directory of ground-truth mask files");
    eval_cmd->add_option("--taxonomy", eval_taxonomy, "beetle5 | beetle9");
    eval_cmd->add_flag("--absent-as-one", eval_absent_as_one,
                       "Score classes absent from both masks as 1.0 instead of skipping them");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (detect_cmd->parsed()) {
            const auto config = effective_config(detect_args);
            return finish_stages({run_stage(config, StageKind::Detect,
                                            {detect_args.trays, detect_args.resume})});
        }
        if (crop_cmd->parsed()) {
            const auto config = effective_config(crop_args);
            return finish_stages(
                {run_stage(config, StageKind::Crop, {crop_args.trays, crop_args.resume})});
        }
        if (segment_cmd->parsed()) {
            const auto config = effective_config(segment_args);
            return finish_stages({run_stage(config, StageKind::Segment,
                                            {segment_args.trays, segment_args.resume})});
        }
        if (all_cmd->parsed()) {
            const auto config = effective_config(all_args);
            return finish_stages(run_all_stages(config, {all_args.trays, all_args.resume}));
        }
        if (eval_cmd->parsed()) {
            std::filesystem::path out_root;
            std::filesystem::path config_output;
            std::filesystem::path config_ground_truth;
            if (!eval_config.empty()) {
                const PipelineConfig config = PipelineConfig::load(eval_config);
                config_output = config.output_dir;
                config_ground_truth = config.ground_truth_csv;
            }
            if (!eval_output.empty()) {
                out_root = eval_output;
            } else {
                out_root = config_output;
            }
            if (out_root.empty()) {
                throw ConfigError("evaluate needs --output or a config with output_dir");
            }

            if (eval_mode == "counts") {
                CountsEvalRequest request;
                request.counts_csv = eval_counts;
                if (eval_counts.empty()) {
                    request.manifest_path = !eval_manifest.empty()
                                                ? std::filesystem::path(eval_manifest)
                                                : out_root / "manifest.json";
                    request.ground_truth_csv = !eval_ground_truth.empty()
                                                   ? std::filesystem::path(eval_ground_truth)
                                                   : config_ground_truth;
                }
                request.report_dir = out_root / "reports";
                const CountReport report = evaluate_counts(request);
                std::printf("%s", count_report_text(report).c_str());
            } else {
                if (eval_pred.empty() || eval_gt.empty()) {
                    throw ConfigError("segmentation mode needs --pred and --gt directories");
                }
                SegEvalRequest request;
                request.pred_dir = eval_pred;
                request.gt_dir = eval_gt;
                request.taxonomy_name = eval_taxonomy;
                request.absent_as_one = eval_absent_as_one;
                request.report_dir = out_root / "reports";
                const SegReport report = evaluate_segmentation(request);
                std::printf("%s", seg_report_text(report, Taxonomy::named(eval_taxonomy)).c_str());
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
