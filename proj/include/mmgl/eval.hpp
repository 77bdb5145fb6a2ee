#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmgl/data_ingest.hpp"
#include "mmgl/model.hpp"

namespace mmgl {

inline constexpr int kForegroundClasses = kNumClasses - 1;

/// 2|P & G| / (|P| + |G|) for class c; 1 when both sets are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int c);

/// |P & G| / |P | G| for class c; 1 when both sets are empty.
double iou_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int c);

/// Mean IoU over every class (background included) occurring in truth or prediction.
double miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

double pixel_accuracy(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

inline std::span<const std::uint8_t> as_span(const LabelGrid& g) { return {g.data(), static_cast<std::size_t>(g.size())}; }
inline std::span<const std::uint8_t> as_span(const LabelVolume& v) { return v.labels.values; }

struct MetricsRecord {
  std::string run;
  std::uint64_t seed = 0;
  double labeled_fraction = 0.0;
  /// Dice per foreground class 1..7; classes absent from both masks score 1 and are flagged.
  std::array<double, kForegroundClasses> class_dice{};
  std::array<bool, kForegroundClasses> class_present{};
  double mean_dice = 0.0;
  double miou = 0.0;
  double pixacc = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

/// Metrics of one prediction against one ground truth (any shape, flattened).
MetricsRecord compute_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// Mean of present per-class Dice values.
double mean_present_dice(const MetricsRecord& r);

/// Segments every transaxial slice and stacks the masks back into a volume of the input shape.
LabelVolume predict_volume(const Model& model, const Volume& volume);

/// Volume-level metrics of the stacked transaxial predictions.
MetricsRecord evaluate_volume(const Model& model, const Volume& volume, const LabelVolume* labels);

/// Mean over slices of per-slice mean foreground Dice; shown next to the volume-level score.
double slice_mean_dice(const LabelVolume& pred, const LabelVolume& truth);

/// Per-field mean over records; per-class Dice averages only over records where the class is present.
MetricsRecord average_records(std::span<const MetricsRecord> records);

}  // namespace mmgl
