#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmgl/core.hpp"

namespace mmgl {

/// Row-major 2-D grid; rows index height, columns index width.
template <typename Scalar>
using Grid = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Image = Grid<float>;
using LabelGrid = Grid<std::uint8_t>;

inline constexpr int kNumClasses = 8;
inline constexpr int kSliceSize = 160;

/// Multi-channel 2-D activation. `data` is channels x (height*width), pixels row-major.
template <typename Scalar>
struct FeatureMap {
  Grid<Scalar> data;
  Index height = 0;
  Index width = 0;

  FeatureMap() = default;
  FeatureMap(Index channels, Index h, Index w) : data(Grid<Scalar>::Zero(channels, h * w)), height(h), width(w) {}
  FeatureMap(Grid<Scalar> values, Index h, Index w) : data(std::move(values)), height(h), width(w) {}

  Index channels() const { return data.rows(); }
  Index pixels() const { return height * width; }

  Scalar& at(Index c, Index y, Index x) { return data(c, y * width + x); }
  Scalar at(Index c, Index y, Index x) const { return data(c, y * width + x); }

  /// View of channel `c` as a height x width grid.
  auto channel(Index c) { return Eigen::Map<Grid<Scalar>>(data.row(c).data(), height, width); }
  auto channel(Index c) const { return Eigen::Map<const Grid<Scalar>>(data.row(c).data(), height, width); }

  static FeatureMap from_image(const Grid<Scalar>& img) {
    FeatureMap out(1, img.rows(), img.cols());
    out.channel(0) = img;
    return out;
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    return FeatureMap<Other>(data.template cast<Other>(), height, width);
  }
};

struct Shape3 {
  Index depth = 0;
  Index height = 0;
  Index width = 0;

  Index size() const { return depth * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
  return std::to_string(s.depth) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// Dense 3-D grid in (depth, height, width) order, width fastest.
template <typename T>
struct Grid3 {
  Shape3 shape;
  std::vector<T> values;

  Grid3() = default;
  explicit Grid3(Shape3 s, T fill = T{}) : shape(s), values(static_cast<std::size_t>(s.size()), fill) {}

  std::size_t offset(Index z, Index y, Index x) const {
    return static_cast<std::size_t>((z * shape.height + y) * shape.width + x);
  }
  T& operator()(Index z, Index y, Index x) { return values[offset(z, y, x)]; }
  const T& operator()(Index z, Index y, Index x) const { return values[offset(z, y, x)]; }
};

template <typename Scalar>
struct VolumeT {
  std::string id;
  Grid3<Scalar> voxels;

  const Shape3& shape() const { return voxels.shape; }
};

using Volume = VolumeT<float>;

struct LabelVolume {
  Grid3<std::uint8_t> labels;

  const Shape3& shape() const { return labels.shape; }
};

}  // namespace mmgl
