#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "mmgl/data_ingest.hpp"

namespace mmgl {

struct PhantomConfig {
  Shape3 shape{64, 64, 64};
  int n_structures = 7;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
};

/// Mean intensity of class k before noise.
constexpr float phantom_class_mean(int k) { return static_cast<float>(k) / 8.0f; }

inline constexpr Index kMinClassVoxels = 32;

/// Ellipsoids on a zero background in a jittered canonical layout: structure 1 encloses
/// the others. Label k is ellipsoid k, higher k wins on overlap.
std::pair<Volume, LabelVolume> generate_phantom(const PhantomConfig& cfg);

/// Per-class voxel counts, index = class.
std::array<Index, kNumClasses> class_histogram(const LabelVolume& labels);

/// Writes `count` phantoms (phantom_000.nii.gz + phantom_000_label.nii.gz, ...) and manifest.json into `dir`.
std::vector<ManifestEntry> write_phantom_dataset(const std::filesystem::path& dir, int count, std::uint64_t seed,
                                                 PhantomConfig base = {});

}  // namespace mmgl
