#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgl/data_ingest.hpp"

namespace mmgl {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool valid() const { return lo <= hi; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct AugmentationConfig {
  Interval brightness{0.7, 1.3};
  Interval gamma{0.7, 1.5};
  double noise_sigma_max = 0.1;
  double rotation_max_deg = 20.0;
  Interval crop_scale{0.8, 1.0};

  bool rotation = true;
  bool crop = true;
  bool brightness_enabled = true;
  bool gamma_enabled = true;
  bool noise = true;

  void validate() const;
  bool any_spatial() const { return rotation || crop; }
  bool any_enabled() const { return rotation || crop || brightness_enabled || gamma_enabled || noise; }

  /// Same ranges with gamma and noise switched off; used while fine-tuning.
  AugmentationConfig weak() const;
  static AugmentationConfig disabled();
};

/// Output pixel -> source pixel map combining a rotation about the slice centre
/// with a crop that is resized back to full size.
struct SpatialTransform {
  double angle_rad = 0.0;
  double crop_scale = 1.0;
  double crop_y = 0.0;
  double crop_x = 0.0;
  Index size = kSliceSize;

  Eigen::Vector2d source(double y, double x) const;
  bool is_identity() const { return angle_rad == 0.0 && crop_scale == 1.0 && crop_y == 0.0 && crop_x == 0.0; }
};

Image warp_bilinear(const Image& img, const SpatialTransform& t);
LabelGrid warp_nearest(const LabelGrid& mask, const SpatialTransform& t);

/// rotation -> crop-and-resize -> brightness -> gamma -> Gaussian noise -> clamp to [0,1].
/// Masks receive the spatial steps only.
SliceSample augment(const SliceSample& s, const AugmentationConfig& cfg, std::uint64_t seed);

struct SampleSource {
  std::string volume_id;
  ViewAxis view = ViewAxis::transaxial;
  Index slice_index = 0;
};

struct AugmentedPair {
  SliceSample a;
  SliceSample b;
  SampleSource source;
};

AugmentedPair make_pair(const SliceSample& s, const AugmentationConfig& cfg, std::uint64_t seed);

/// The 2b-sample augmentation set of a batch: samples[2m] and samples[2m+1] are
/// the two renditions of batch item m; partner[i] is the index of i's positive.
struct AugmentationSet {
  std::vector<SliceSample> samples;
  std::vector<int> partner;
};

AugmentationSet make_augmentation_set(const std::vector<const SliceSample*>& batch, const AugmentationConfig& cfg,
                                      std::uint64_t seed);

}  // namespace mmgl
