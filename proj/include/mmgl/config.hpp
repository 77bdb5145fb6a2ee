#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmgl/augmentation.hpp"
#include "mmgl/data_ingest.hpp"
#include "mmgl/losses.hpp"
#include "mmgl/model.hpp"

namespace mmgl {

enum class Stage : std::uint8_t { global_pretrain, local_pretrain, finetune };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct StageConfig {
  Stage stage = Stage::global_pretrain;
  int epochs = 5;
  int batch_size = 8;
  double learning_rate = 1e-3;
  std::vector<ViewAxis> views{ViewAxis::transaxial, ViewAxis::coronal, ViewAxis::sagittal};
  bool labeled_only = false;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> init_checkpoint;
  /// Slices drawn per epoch; 0 uses every available slice.
  int samples_per_epoch = 0;
  /// Global/local: contrastive pairs are always augmented. Finetune: weak augmentation on/off.
  bool augment = true;
  /// Local stage only: keep encoder weights fixed.
  bool freeze_encoder = false;

  void validate() const;
  static StageConfig defaults(Stage stage);
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct DataConfig {
  std::filesystem::path manifest;
  /// Existing split file; when empty the split is drawn from `labeled_fraction` and `split_seed`.
  std::filesystem::path split;
  double labeled_fraction = 0.2;
  std::uint64_t split_seed = 0;
  /// Drop slices whose mask is entirely background (labeled slices only).
  bool skip_empty_slices = false;
  /// Every n-th transaxial slice of the validation volumes is scored during fine-tuning.
  int val_stride = 1;
};

struct ExperimentConfig {
  DataConfig data;
  AugmentationConfig augmentation;
  ModelConfig model;
  ContrastiveConfig contrastive;
  LossWeights weights;
  StageConfig global_stage = StageConfig::defaults(Stage::global_pretrain);
  StageConfig local_stage = StageConfig::defaults(Stage::local_pretrain);
  StageConfig finetune_stage = StageConfig::defaults(Stage::finetune);
  std::uint64_t seed = 0;
  int num_workers = 1;
  bool allow_any_init = false;

  ExperimentConfig() { set_seed(0); }

  const StageConfig& stage(Stage s) const;
  StageConfig& stage(Stage s);

  /// Sets the experiment seed and re-derives every stage seed from it.
  void set_seed(std::uint64_t s);
  void validate() const;
};

/// Strict YAML parsing: unknown keys are rejected with their dotted path.
ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);

/// MMGL_NUM_WORKERS when set, otherwise the configured worker count.
int resolve_num_workers(const ExperimentConfig& cfg);

}  // namespace mmgl
