#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl {

enum class ViewAxis : std::uint8_t { transaxial, coronal, sagittal };

inline constexpr ViewAxis kAllViews[] = {ViewAxis::transaxial, ViewAxis::coronal, ViewAxis::sagittal};

std::string to_string(ViewAxis view);
/// Accepts full names and the single-letter forms t, c, s.
ViewAxis parse_view(const std::string& text);
/// Parses a comma-separated list such as "t,c,s".
std::vector<ViewAxis> parse_views(const std::string& text);

struct SliceSample {
  Image image;
  ViewAxis view = ViewAxis::transaxial;
  std::string volume_id;
  Index slice_index = 0;
  std::optional<LabelGrid> mask;
};

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  /// Subset of train_ids whose labels are used.
  std::vector<std::string> labeled_ids;
  double labeled_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::optional<std::filesystem::path> label;
};

struct LoadedVolume {
  Volume volume;
  std::optional<LabelVolume> labels;
};

// NIfTI-1 I/O (.nii and .nii.gz). Voxel (i,j,k) maps to (width,height,depth).
Volume read_nifti_volume(const std::filesystem::path& path);
LabelVolume read_nifti_labels(const std::filesystem::path& path);
void write_nifti(const std::filesystem::path& path, const Volume& volume);
void write_nifti(const std::filesystem::path& path, const LabelVolume& labels);

/// Loads an image and optional label file, validating finiteness, label range and shape agreement.
LoadedVolume load_volume(const std::filesystem::path& image,
                         const std::optional<std::filesystem::path>& label = std::nullopt,
                         std::string id = {});

void validate(const Volume& volume);
void validate(const LabelVolume& labels);

/// One raw (pre-resize, un-normalized) slice per index along `axis`.
/// transaxial walks depth, coronal walks height, sagittal walks width.
std::vector<SliceSample> slice_volume(const Volume& volume, const LabelVolume* labels, ViewAxis axis);

Index slice_count(const Shape3& shape, ViewAxis axis);

Image normalize_minmax(const Image& img);

Image resize_slice(const Image& img, Index size = kSliceSize);
LabelGrid resize_mask(const LabelGrid& mask, Index size = kSliceSize);

/// Normalizes and resizes a raw slice (and its mask) to the network input size.
SliceSample prepare_slice(SliceSample raw, Index size = kSliceSize);

/// Inverse of the slicing map: writes a slice back into a volume-shaped grid.
template <typename T>
void place_slice(Grid3<T>& volume, ViewAxis axis, Index index, const Grid<T>& slice);

DatasetSplit split_dataset(std::vector<std::string> ids, double labeled_fraction, std::uint64_t seed);

LabelGrid downsample_labels(const LabelGrid& mask, Index stride);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

void write_split(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit read_split(const std::filesystem::path& path);

template <typename T>
void place_slice(Grid3<T>& volume, ViewAxis axis, Index index, const Grid<T>& slice) {
  const Shape3& s = volume.shape;
  switch (axis) {
    case ViewAxis::transaxial:
      require(slice.rows() == s.height && slice.cols() == s.width, ErrorKind::shape_mismatch, "transaxial slice");
      for (Index y = 0; y < s.height; ++y)
        for (Index x = 0; x < s.width; ++x) volume(index, y, x) = slice(y, x);
      break;
    case ViewAxis::coronal:
      require(slice.rows() == s.depth && slice.cols() == s.width, ErrorKind::shape_mismatch, "coronal slice");
      for (Index z = 0; z < s.depth; ++z)
        for (Index x = 0; x < s.width; ++x) volume(z, index, x) = slice(z, x);
      break;
    case ViewAxis::sagittal:
      require(slice.rows() == s.depth && slice.cols() == s.height, ErrorKind::shape_mismatch, "sagittal slice");
      for (Index z = 0; z < s.depth; ++z)
        for (Index y = 0; y < s.height; ++y) volume(z, y, index) = slice(z, y);
      break;
  }
}

}  // namespace mmgl
