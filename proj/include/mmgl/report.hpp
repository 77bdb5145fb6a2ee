#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmgl/eval.hpp"
#include "mmgl/trainer.hpp"

namespace mmgl {

/// One row per record, then a blank line and a per-run aggregate block (mean and sample std).
std::string metrics_csv(const std::vector<MetricsRecord>& records);
std::string metrics_json(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> parse_metrics_json(const std::string& text);

/// stage,epoch,loss,level_2,level_3,level_4,val_dice,degenerate (newline-terminated)
std::string journal_header();
std::string journal_row(Stage stage, const EpochRecord& r);

/// Bars of the per-run mean of `metric` (mean_dice, miou or pixacc) with +-1 std whiskers.
std::string bar_chart_svg(const std::vector<MetricsRecord>& records, const std::string& metric);

/// Grey slice in [0,1] with a translucent class colour per foreground label; same size as the slice.
void write_overlay_png(const std::filesystem::path& path, const Image& slice, const LabelGrid& mask);

/// Reads a PNG written by write_overlay_png back as (height, width).
std::pair<Index, Index> png_size(const std::filesystem::path& path);

/// Writes metrics.csv, metrics.json and one SVG chart per metric; returns the written paths.
std::vector<std::filesystem::path> emit_report(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir);

/// Predicted and true overlays of the middle transaxial slice; returns the written paths.
std::vector<std::filesystem::path> emit_overlays(const Model& model, const LoadedVolume& volume, const std::filesystem::path& out_dir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace mmgl
