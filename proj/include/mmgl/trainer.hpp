#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmgl/augmentation.hpp"
#include "mmgl/config.hpp"
#include "mmgl/data_ingest.hpp"
#include "mmgl/losses.hpp"
#include "mmgl/model.hpp"
#include "mmgl/nn/adam.hpp"

namespace mmgl {

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  std::array<double, kHeadCount> level{};
  /// Validation mean foreground Dice (finetune only); -1 when not measured.
  double val_dice = -1.0;
  /// Local stage: samples whose mask had fewer than two classes at some level.
  int degenerate = 0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainState {
  int epoch = 0;
  std::vector<EpochRecord> history;
  long optimizer_steps = 0;
  double best_val = -1.0;
  int best_epoch = 0;

  /// FNV-1a over the serialised history; stored next to the state to catch tampering.
  std::uint64_t digest() const;
  friend bool operator==(const TrainState&, const TrainState&) = default;
};

using OptimizerState = std::map<std::string, nn::AdamMoments<float>>;

struct Checkpoint {
  Stage stage = Stage::global_pretrain;
  ModelConfig model_config;
  StageConfig stage_config;
  TrainState state;
  Model model{ModelConfig{}};
  OptimizerState optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// With `expected` set, a differing model configuration is a config-mismatch error.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
bool parameters_equal(const Model& a, const Model& b);

// ---------------------------------------------------------------------------

struct TrainOptions {
  ModelConfig model;
  ContrastiveConfig contrastive;
  LossWeights weights;
  AugmentationConfig augmentation;
  bool allow_any_init = false;
  /// Finetune rejects slices from views other than transaxial.
  bool strict_views = true;
  int num_workers = 1;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the running state after every epoch (for resumable runs).
  std::function<void(const Checkpoint&)> on_checkpoint;

  static TrainOptions from(const ExperimentConfig& cfg);
};

struct StageResult {
  Checkpoint last;
  /// Finetune: the checkpoint with the best validation Dice. Pre-training stages leave it empty.
  std::optional<Checkpoint> best;
};

/// Held-out volumes scored during fine-tuning.
struct ValidationSet {
  std::vector<const LoadedVolume*> volumes;
  /// Every `stride`-th transaxial slice is scored.
  int stride = 1;
};

/// Prepared (normalized, resized) slices of the listed volumes along `views`.
std::vector<SliceSample> build_slices(std::span<const LoadedVolume> volumes, const std::vector<std::string>& ids,
                                      const std::vector<ViewAxis>& views, bool need_masks, bool skip_empty,
                                      Index size = kSliceSize);

/// Slice order of one epoch: views interleaved round-robin after a seeded shuffle within each view,
/// truncated to `limit` when positive.
std::vector<std::size_t> epoch_order(std::span<const SliceSample> data, std::uint64_t seed, int epoch, int limit);

StageResult pretrain_global(std::span<const SliceSample> data, const StageConfig& cfg, const TrainOptions& opt,
                            const Checkpoint* init = nullptr, const Checkpoint* resume = nullptr);
StageResult pretrain_local(std::span<const SliceSample> data, const Checkpoint* init, const StageConfig& cfg,
                           const TrainOptions& opt, const Checkpoint* resume = nullptr);
StageResult finetune(std::span<const SliceSample> data, const ValidationSet& val, const Checkpoint* init,
                     const StageConfig& cfg, const TrainOptions& opt, const Checkpoint* resume = nullptr);

/// Mean foreground Dice of the stacked predictions on the validation slices.
double validation_dice(const Model& model, const ValidationSet& val);

}  // namespace mmgl
