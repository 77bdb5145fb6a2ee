#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmgl/config.hpp"
#include "mmgl/eval.hpp"
#include "mmgl/trainer.hpp"

namespace mmgl {

struct Dataset {
  std::vector<LoadedVolume> volumes;
  DatasetSplit split;

  const LoadedVolume& volume(const std::string& id) const;
  std::vector<const LoadedVolume*> volumes_of(const std::vector<std::string>& ids) const;
};

/// Loads every manifest volume; uses `split_file` when given, otherwise draws the split
/// from `data.labeled_fraction` and `data.split_seed`.
Dataset load_dataset(const DataConfig& data);

/// Which components of the workflow a run uses.
struct ArmSpec {
  std::string name;
  bool deep_supervision = true;
  bool global = true;
  bool multi_view = true;
  bool local = true;

  friend bool operator==(const ArmSpec&, const ArmSpec&) = default;
};

/// Random, +DS, +DS+MG, +DS+MG+MV, MMGL.
std::vector<ArmSpec> default_arms();

/// Accepts the arm names above (case-insensitive) or a '+'-joined toggle list over
/// {random, ds, mg, mv, local}; anything else is an error.
ArmSpec parse_arm(const std::string& text);

/// Reference mean Dice (%) of the ladder at 20% labels, printed for context; not a target at desk scale.
struct ReferenceDice {
  const char* arm;
  double dice;
};
inline constexpr ReferenceDice kReferenceLadder[] = {
    {"Random", 72.3}, {"+DS", 73.8}, {"+DS+MG", 77.3}, {"+DS+MG+MV", 81.1}, {"MMGL", 82.8}};

struct StageJournal {
  Stage stage;
  std::vector<EpochRecord> epochs;
};

struct PipelineResult {
  std::vector<StageJournal> journals;
  Checkpoint final_checkpoint;
  double best_val = -1.0;
  std::optional<MetricsRecord> test;
};

struct PipelineOptions {
  bool evaluate_test = true;
  std::function<void(Stage, const EpochRecord&)> on_epoch;
};

/// Runs the stages enabled by `arm` with `cfg` (seeds already set) and scores the
/// best fine-tuned checkpoint on the test volumes.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& data, const ArmSpec& arm, const PipelineOptions& opt = {});

/// Mean test metrics of the best checkpoint over the given volumes.
MetricsRecord evaluate_volumes(const Model& model, const std::vector<const LoadedVolume*>& volumes);

struct ArmSummary {
  std::string run;
  int n = 0;
  double mean_dice = 0, std_dice = 0;
  double mean_miou = 0, std_miou = 0;
  double mean_pixacc = 0, std_pixacc = 0;
};

/// Per-run mean and sample standard deviation, in first-appearance order.
std::vector<ArmSummary> summarize(const std::vector<MetricsRecord>& records);

/// Runs every arm for every seed; records carry run = arm name.
std::vector<MetricsRecord> ablation_run(const std::vector<ArmSpec>& arms, const ExperimentConfig& cfg, const Dataset& data,
                                        const std::vector<std::uint64_t>& seeds, const PipelineOptions& opt = {},
                                        const std::function<void(const MetricsRecord&)>& on_record = {});

/// Plain-text table of mean +- std per arm next to the reference values.
std::string format_ablation_table(const std::vector<ArmSummary>& rows);

}  // namespace mmgl
