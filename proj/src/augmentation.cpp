#include <algorithm>
#include <cmath>
#include <numbers>

#include "mmgl/augmentation.hpp"

namespace mmgl {

void AugmentationConfig::validate() const {
  require(brightness.valid() && gamma.valid() && crop_scale.valid(), ErrorKind::invalid_config,
          "augmentation intervals must be non-empty");
  require(noise_sigma_max >= 0.0, ErrorKind::invalid_config, "noise_sigma_max must be >= 0");
  require(rotation_max_deg >= 0.0, ErrorKind::invalid_config, "rotation_max_deg must be >= 0");
  require(crop_scale.lo > 0.0 && crop_scale.hi <= 1.0, ErrorKind::invalid_config, "crop_scale must lie in (0,1]");
  require(brightness.lo > 0.0 && gamma.lo > 0.0, ErrorKind::invalid_config, "brightness and gamma must be positive");
}

AugmentationConfig AugmentationConfig::weak() const {
  AugmentationConfig w = *this;
  w.gamma_enabled = false;
  w.noise = false;
  return w;
}

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig c;
  c.rotation = c.crop = c.brightness_enabled = c.gamma_enabled = c.noise = false;
  return c;
}

Eigen::Vector2d SpatialTransform::source(double y, double x) const {
  // Crop: output pixel centre -> coordinate in the rotated frame.
  const double u = crop_y + (y + 0.5) * crop_scale - 0.5;
  const double v = crop_x + (x + 0.5) * crop_scale - 0.5;
  // Rotation about the centre; inverse map back into the source slice.
  const double c = 0.5 * static_cast<double>(size - 1);
  const double cs = std::cos(angle_rad);
  const double sn = std::sin(angle_rad);
  const double dy = u - c;
  const double dx = v - c;
  return {c + cs * dy + sn * dx, c - sn * dy + cs * dx};
}

Image warp_bilinear(const Image& img, const SpatialTransform& t) {
  if (t.is_identity()) return img;
  const Index h = img.rows();
  const Index w = img.cols();
  Image out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Eigen::Vector2d p = t.source(static_cast<double>(y), static_cast<double>(x));
      const double sy = std::clamp(p[0], 0.0, static_cast<double>(h - 1));
      const double sx = std::clamp(p[1], 0.0, static_cast<double>(w - 1));
      const auto y0 = static_cast<Index>(std::floor(sy));
      const auto x0 = static_cast<Index>(std::floor(sx));
      const Index y1 = std::min(y0 + 1, h - 1);
      const Index x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - static_cast<double>(y0);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * img(y0, x0) + fx * img(y0, x1);
      const double bottom = (1.0 - fx) * img(y1, x0) + fx * img(y1, x1);
      out(y, x) = static_cast<float>((1.0 - fy) * top + fy * bottom);
    }
  return out;
}

LabelGrid warp_nearest(const LabelGrid& mask, const SpatialTransform& t) {
  if (t.is_identity()) return mask;
  const Index h = mask.rows();
  const Index w = mask.cols();
  LabelGrid out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Eigen::Vector2d p = t.source(static_cast<double>(y), static_cast<double>(x));
      const auto sy = static_cast<Index>(std::clamp(std::lround(p[0]), 0L, static_cast<long>(h - 1)));
      const auto sx = static_cast<Index>(std::clamp(std::lround(p[1]), 0L, static_cast<long>(w - 1)));
      out(y, x) = mask(sy, sx);
    }
  return out;
}

SliceSample augment(const SliceSample& s, const AugmentationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(s.image.rows() == s.image.cols(), ErrorKind::invalid_input, "augment expects square slices");
  if (s.mask) require(s.mask->rows() == s.image.rows() && s.mask->cols() == s.image.cols(), ErrorKind::shape_mismatch,
                      "mask and image differ in shape");
  if (!cfg.any_enabled()) return s;

  Rng rng(seed);
  auto uniform = [&rng](double lo, double hi) { return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng); };

  SpatialTransform t;
  t.size = s.image.rows();
  if (cfg.rotation) t.angle_rad = uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) * std::numbers::pi / 180.0;
  if (cfg.crop) {
    t.crop_scale = uniform(cfg.crop_scale.lo, cfg.crop_scale.hi);
    const double slack = (1.0 - t.crop_scale) * static_cast<double>(t.size);
    t.crop_y = uniform(0.0, slack);
    t.crop_x = uniform(0.0, slack);
  }

  SliceSample out = s;
  out.image = warp_bilinear(s.image, t);
  if (s.mask) out.mask = warp_nearest(*s.mask, t);

  if (cfg.brightness_enabled) out.image *= static_cast<float>(uniform(cfg.brightness.lo, cfg.brightness.hi));
  if (cfg.gamma_enabled) {
    const auto g = static_cast<float>(uniform(cfg.gamma.lo, cfg.gamma.hi));
    out.image = out.image.array().max(0.0f).pow(g).matrix();
  }
  if (cfg.noise && cfg.noise_sigma_max > 0.0) {
    const double sigma = uniform(0.0, cfg.noise_sigma_max);
    std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
    for (Index i = 0; i < out.image.size(); ++i) out.image.data()[i] += n(rng);
  }
  out.image = out.image.cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

AugmentedPair make_pair(const SliceSample& s, const AugmentationConfig& cfg, std::uint64_t seed) {
  return {augment(s, cfg, derive_seed(seed, 0)), augment(s, cfg, derive_seed(seed, 1)),
          {s.volume_id, s.view, s.slice_index}};
}

AugmentationSet make_augmentation_set(const std::vector<const SliceSample*>& batch, const AugmentationConfig& cfg,
                                      std::uint64_t seed) {
  AugmentationSet set;
  set.samples.reserve(2 * batch.size());
  set.partner.reserve(2 * batch.size());
  for (std::size_t m = 0; m < batch.size(); ++m) {
    auto pair = make_pair(*batch[m], cfg, derive_seed(seed, m));
    set.samples.push_back(std::move(pair.a));
    set.samples.push_back(std::move(pair.b));
    set.partner.push_back(static_cast<int>(2 * m + 1));
    set.partner.push_back(static_cast<int>(2 * m));
  }
  return set;
}

}  // namespace mmgl
