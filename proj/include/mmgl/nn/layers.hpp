#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl::nn {

/// A trainable tensor and its accumulated gradient.
template <typename Scalar>
struct Param {
  Grid<Scalar> value;
  Grid<Scalar> grad;

  Param() = default;
  Param(Index rows, Index cols) : value(Grid<Scalar>::Zero(rows, cols)), grad(Grid<Scalar>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

template <typename Scalar>
struct NamedParam {
  std::string name;
  Param<Scalar>* param;
};

template <typename Scalar>
using ParamList = std::vector<NamedParam<Scalar>>;

/// He-normal initialisation, bias left at zero.
template <typename Scalar>
void he_init(Param<Scalar>& weight, Index fan_in, Rng& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<Scalar>(n(rng));
}

// ---------------------------------------------------------------------------
// im2col for square kernels with zero padding k/2 and stride 1.

template <typename Scalar>
void im2col(const FeatureMap<Scalar>& x, Index k, Grid<Scalar>& cols) {
  const Index h = x.height, w = x.width, pad = k / 2;
  cols.resize(x.channels() * k * k, h * w);
  for (Index c = 0; c < x.channels(); ++c) {
    const Scalar* src = x.data.row(c).data();
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* dst = cols.row((c * k + ky) * k + kx).data();
        const Index dy = ky - pad, dx = kx - pad;
        const Index x_lo = std::max<Index>(0, -dx), x_hi = std::min(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          Scalar* out = dst + y * w;
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, Scalar(0));
            continue;
          }
          const Scalar* in = src + sy * w + dx;
          std::fill(out, out + x_lo, Scalar(0));
          std::copy(in + x_lo, in + x_hi, out + x_lo);
          std::fill(out + x_hi, out + w, Scalar(0));
        }
      }
  }
}

template <typename Scalar>
void col2im(const Grid<Scalar>& cols, Index k, FeatureMap<Scalar>& dx_out) {
  const Index h = dx_out.height, w = dx_out.width, pad = k / 2;
  dx_out.data.setZero();
  for (Index c = 0; c < dx_out.channels(); ++c) {
    Scalar* dst = dx_out.data.row(c).data();
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* src = cols.row((c * k + ky) * k + kx).data();
        const Index dy = ky - pad, dx = kx - pad;
        const Index x_lo = std::max<Index>(0, -dx), x_hi = std::min(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const Scalar* in = src + y * w;
          Scalar* out = dst + sy * w + dx;
          for (Index xx = x_lo; xx < x_hi; ++xx) out[xx] += in[xx];
        }
      }
  }
}

// ---------------------------------------------------------------------------

/// Stride-1 convolution with a k x k kernel (k odd) and same padding.
template <typename Scalar>
struct Conv2d {
  Index in_channels = 0, out_channels = 0, kernel = 1;
  Param<Scalar> weight;  // out x (in*k*k)
  Param<Scalar> bias;    // out x 1

  Conv2d() = default;
  Conv2d(Index in, Index out, Index k) : in_channels(in), out_channels(out), kernel(k), weight(out, in * k * k), bias(out, 1) {}

  void init(Rng& rng) { he_init(weight, in_channels * kernel * kernel, rng); }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x) const {
    require(x.channels() == in_channels, ErrorKind::shape_mismatch, "conv input channels");
    FeatureMap<Scalar> y(out_channels, x.height, x.width);
    if (kernel == 1) {
      y.data.noalias() = weight.value * x.data;
    } else {
      Grid<Scalar> cols;
      im2col(x, kernel, cols);
      y.data.noalias() = weight.value * cols;
    }
    y.data.colwise() += bias.value.col(0);
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx unless `need_input_grad` is false.
  FeatureMap<Scalar> backward(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& dy, bool need_input_grad = true) {
    bias.grad.col(0) += dy.data.rowwise().sum();
    if (kernel == 1) {
      weight.grad.noalias() += dy.data * x.data.transpose();
      if (!need_input_grad) return {};
      FeatureMap<Scalar> dx(in_channels, x.height, x.width);
      dx.data.noalias() = weight.value.transpose() * dy.data;
      return dx;
    }
    Grid<Scalar> cols;
    im2col(x, kernel, cols);
    weight.grad.noalias() += dy.data * cols.transpose();
    if (!need_input_grad) return {};
    cols.noalias() = weight.value.transpose() * dy.data;
    FeatureMap<Scalar> dx(in_channels, x.height, x.width);
    col2im(cols, kernel, dx);
    return dx;
  }

  void collect(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename Scalar>
struct Linear {
  Index in_features = 0, out_features = 0;
  Param<Scalar> weight;  // out x in
  Param<Scalar> bias;    // out x 1

  Linear() = default;
  Linear(Index in, Index out) : in_features(in), out_features(out), weight(out, in), bias(out, 1) {}

  void init(Rng& rng) { he_init(weight, in_features, rng); }

  Vector<Scalar> forward(const Vector<Scalar>& x) const { return weight.value * x + bias.value.col(0); }

  Vector<Scalar> backward(const Vector<Scalar>& x, const Vector<Scalar>& dy) {
    weight.grad.noalias() += dy * x.transpose();
    bias.grad.col(0) += dy;
    return weight.value.transpose() * dy;
  }

  void collect(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

// ---------------------------------------------------------------------------
// Parameter-free operations.

template <typename Derived>
void relu_inplace(Eigen::MatrixBase<Derived>& x) {
  x = x.cwiseMax(typename Derived::Scalar(0));
}

/// dy masked by the positive support of the ReLU output y.
template <typename Scalar>
Grid<Scalar> relu_backward(const Grid<Scalar>& y, const Grid<Scalar>& dy) {
  return (y.array() > Scalar(0)).select(dy, Scalar(0));
}

template <typename Scalar>
Vector<Scalar> relu_backward(const Vector<Scalar>& y, const Vector<Scalar>& dy) {
  return (y.array() > Scalar(0)).select(dy, Scalar(0));
}

/// 2x2 max pooling with stride 2; `argmax` records the winning input pixel.
template <typename Scalar>
FeatureMap<Scalar> max_pool2(const FeatureMap<Scalar>& x, std::vector<std::int32_t>& argmax) {
  require(x.height % 2 == 0 && x.width % 2 == 0, ErrorKind::shape_mismatch, "max_pool2 needs even dimensions");
  const Index oh = x.height / 2, ow = x.width / 2;
  FeatureMap<Scalar> y(x.channels(), oh, ow);
  argmax.resize(static_cast<std::size_t>(x.channels() * oh * ow));
  for (Index c = 0; c < x.channels(); ++c) {
    const Scalar* in = x.data.row(c).data();
    Scalar* out = y.data.row(c).data();
    std::int32_t* arg = argmax.data() + c * oh * ow;
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        Index best = (2 * oy) * x.width + 2 * ox;
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx) {
            const Index i = (2 * oy + dy) * x.width + 2 * ox + dx;
            if (in[i] > in[best]) best = i;
          }
        out[oy * ow + ox] = in[best];
        arg[oy * ow + ox] = static_cast<std::int32_t>(best);
      }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> max_pool2_backward(const FeatureMap<Scalar>& dy, const std::vector<std::int32_t>& argmax, Index in_height,
                                      Index in_width) {
  FeatureMap<Scalar> dx(dy.channels(), in_height, in_width);
  const Index n = dy.pixels();
  for (Index c = 0; c < dy.channels(); ++c) {
    const Scalar* g = dy.data.row(c).data();
    Scalar* out = dx.data.row(c).data();
    const std::int32_t* arg = argmax.data() + c * n;
    for (Index i = 0; i < n; ++i) out[arg[i]] += g[i];
  }
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> upsample_nearest2(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y(x.channels(), 2 * x.height, 2 * x.width);
  for (Index c = 0; c < x.channels(); ++c) {
    const Scalar* in = x.data.row(c).data();
    Scalar* out = y.data.row(c).data();
    for (Index yy = 0; yy < y.height; ++yy)
      for (Index xx = 0; xx < y.width; ++xx) out[yy * y.width + xx] = in[(yy / 2) * x.width + xx / 2];
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> upsample_nearest2_backward(const FeatureMap<Scalar>& dy) {
  FeatureMap<Scalar> dx(dy.channels(), dy.height / 2, dy.width / 2);
  for (Index c = 0; c < dy.channels(); ++c) {
    const Scalar* in = dy.data.row(c).data();
    Scalar* out = dx.data.row(c).data();
    for (Index yy = 0; yy < dy.height; ++yy)
      for (Index xx = 0; xx < dy.width; ++xx) out[(yy / 2) * dx.width + xx / 2] += in[yy * dy.width + xx];
  }
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
  require(a.height == b.height && a.width == b.width, ErrorKind::shape_mismatch, "concat spatial sizes");
  FeatureMap<Scalar> y(a.channels() + b.channels(), a.height, a.width);
  y.data.topRows(a.channels()) = a.data;
  y.data.bottomRows(b.channels()) = b.data;
  return y;
}

template <typename Scalar>
Vector<Scalar> global_avg_pool(const FeatureMap<Scalar>& x) {
  return x.data.rowwise().mean();
}

template <typename Scalar>
FeatureMap<Scalar> global_avg_pool_backward(const Vector<Scalar>& dv, Index height, Index width) {
  FeatureMap<Scalar> dx(dv.size(), height, width);
  dx.data.colwise() = dv / static_cast<Scalar>(height * width);
  return dx;
}

/// Norms below this are treated as degenerate and divided by the floor instead.
template <typename Scalar>
constexpr Scalar kNormFloor = Scalar(1e-12);

template <typename Scalar>
Vector<Scalar> l2_normalize(const Vector<Scalar>& x) {
  return x / std::max(x.norm(), kNormFloor<Scalar>);
}

/// Gradient of x / |x| given the normalised output y.
template <typename Scalar>
Vector<Scalar> l2_normalize_backward(const Vector<Scalar>& x, const Vector<Scalar>& y, const Vector<Scalar>& dy) {
  const Scalar n = std::max(x.norm(), kNormFloor<Scalar>);
  return (dy - y * y.dot(dy)) / n;
}

/// Column-wise normalisation of a (features x points) matrix.
template <typename Scalar>
Grid<Scalar> l2_normalize_columns(const Grid<Scalar>& x) {
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> n = x.colwise().norm().array().max(kNormFloor<Scalar>);
  return (x.array().rowwise() / n).matrix();
}

template <typename Scalar>
Grid<Scalar> l2_normalize_columns_backward(const Grid<Scalar>& x, const Grid<Scalar>& y, const Grid<Scalar>& dy) {
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> n = x.colwise().norm().array().max(kNormFloor<Scalar>);
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> proj = (y.array() * dy.array()).colwise().sum();
  return ((dy.array() - y.array().rowwise() * proj).rowwise() / n).matrix();
}

}  // namespace mmgl::nn
