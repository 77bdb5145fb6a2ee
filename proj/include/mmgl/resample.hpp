#pragma once

#include <algorithm>
#include <cmath>

#include "mmgl/tensor.hpp"

namespace mmgl {

/// Linear interpolation weights mapping `in` samples onto `out` samples with
/// half-pixel centers and edge clamping. Each row is a convex combination, so
/// resampling never leaves the input range, and in == out gives the identity.
template <typename Scalar>
Grid<Scalar> interpolation_matrix(Index out, Index in) {
  Grid<Scalar> r = Grid<Scalar>::Zero(out, in);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in - 1);
    const double t = src - static_cast<double>(lo);
    r(i, lo) += static_cast<Scalar>(1.0 - t);
    if (hi != lo) r(i, hi) += static_cast<Scalar>(t);
  }
  return r;
}

/// Nearest source index for each output index (half-pixel centers).
inline std::vector<Index> nearest_indices(Index out, Index in) {
  std::vector<Index> idx(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    const auto src = static_cast<Index>(std::floor((static_cast<double>(i) + 0.5) * scale));
    idx[static_cast<std::size_t>(i)] = std::min(src, in - 1);
  }
  return idx;
}

template <typename Derived>
Grid<typename Derived::Scalar> resize_bilinear(const Eigen::MatrixBase<Derived>& img, Index height, Index width) {
  using Scalar = typename Derived::Scalar;
  if (img.rows() == height && img.cols() == width) return img;
  const Grid<Scalar> ry = interpolation_matrix<Scalar>(height, img.rows());
  const Grid<Scalar> rx = interpolation_matrix<Scalar>(width, img.cols());
  return ry * img * rx.transpose();
}

template <typename Derived>
Grid<typename Derived::Scalar> resize_nearest(const Eigen::MatrixBase<Derived>& img, Index height, Index width) {
  using Scalar = typename Derived::Scalar;
  const auto iy = nearest_indices(height, img.rows());
  const auto ix = nearest_indices(width, img.cols());
  Grid<Scalar> out(height, width);
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) out(y, x) = img(iy[static_cast<std::size_t>(y)], ix[static_cast<std::size_t>(x)]);
  return out;
}

/// Bilinear resize of every channel of a feature map.
template <typename Scalar>
FeatureMap<Scalar> resize_bilinear(const FeatureMap<Scalar>& in, Index height, Index width) {
  if (in.height == height && in.width == width) return in;
  const Grid<Scalar> ry = interpolation_matrix<Scalar>(height, in.height);
  const Grid<Scalar> rx_t = interpolation_matrix<Scalar>(width, in.width).transpose();
  FeatureMap<Scalar> out(in.channels(), height, width);
  for (Index c = 0; c < in.channels(); ++c) out.channel(c) = ry * in.channel(c) * rx_t;
  return out;
}

/// Adjoint of `resize_bilinear` on feature maps: maps an output gradient back to the input grid.
template <typename Scalar>
FeatureMap<Scalar> resize_bilinear_backward(const FeatureMap<Scalar>& grad_out, Index in_height, Index in_width) {
  if (grad_out.height == in_height && grad_out.width == in_width) return grad_out;
  const Grid<Scalar> ry_t = interpolation_matrix<Scalar>(grad_out.height, in_height).transpose();
  const Grid<Scalar> rx = interpolation_matrix<Scalar>(grad_out.width, in_width);
  FeatureMap<Scalar> out(grad_out.channels(), in_height, in_width);
  for (Index c = 0; c < grad_out.channels(); ++c) out.channel(c) = ry_t * grad_out.channel(c) * rx;
  return out;
}

}  // namespace mmgl
