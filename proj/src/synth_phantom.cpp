#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mmgl/synth_phantom.hpp"

namespace mmgl {
namespace {

struct Ellipsoid {
  Eigen::Vector3d center;      // (z, y, x) in voxels
  Eigen::Vector3d semi_axes;   // in voxels
  Eigen::Matrix3d rotation;    // world -> body
};

// Canonical layout as fractions of (depth, height, width): one large enclosing
// structure and six smaller ones arranged inside it, like chambers and vessels.
struct Placement {
  std::array<double, 3> center;
  std::array<double, 3> semi_axes;
};

constexpr std::array<Placement, kNumClasses - 1> kLayout{{
    {{0.50, 0.50, 0.50}, {0.32, 0.34, 0.34}},
    {{0.46, 0.38, 0.37}, {0.12, 0.11, 0.10}},
    {{0.46, 0.38, 0.63}, {0.12, 0.10, 0.11}},
    {{0.54, 0.63, 0.37}, {0.11, 0.11, 0.10}},
    {{0.54, 0.63, 0.63}, {0.11, 0.10, 0.11}},
    {{0.30, 0.50, 0.50}, {0.08, 0.09, 0.09}},
    {{0.70, 0.50, 0.50}, {0.08, 0.08, 0.08}},
}};

Ellipsoid sample_ellipsoid(int k, const Shape3& s, Rng& rng) {
  const Eigen::Vector3d dims(static_cast<double>(s.depth), static_cast<double>(s.height), static_cast<double>(s.width));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Placement& base = kLayout[static_cast<std::size_t>(k - 1)];
  Ellipsoid e;
  for (int a = 0; a < 3; ++a) {
    e.center[a] = dims[a] * (base.center[static_cast<std::size_t>(a)] + 0.03 * u(rng));
    e.semi_axes[a] = dims[a] * base.semi_axes[static_cast<std::size_t>(a)] * (1.0 + 0.15 * u(rng));
  }
  const double angle = 0.3 * u(rng);
  e.rotation = Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitX()).toRotationMatrix();

  // Keep every structure clear of the boundary (2-voxel margin).
  for (int a = 0; a < 3; ++a) {
    const double reach = e.semi_axes.maxCoeff();
    const double lo = reach + 2.0;
    const double hi = dims[a] - reach - 3.0;
    e.center[a] = lo <= hi ? std::clamp(e.center[a], lo, hi) : 0.5 * dims[a];
    if (lo > hi) e.semi_axes[a] = std::max(1.0, 0.5 * dims[a] - 3.0);
  }
  return e;
}

bool inside(const Ellipsoid& e, const Eigen::Vector3d& p) {
  const Eigen::Vector3d q = e.rotation * (p - e.center);
  return (q.array() / e.semi_axes.array()).square().sum() <= 1.0;
}

}  // namespace

std::array<Index, kNumClasses> class_histogram(const LabelVolume& labels) {
  std::array<Index, kNumClasses> h{};
  for (auto v : labels.labels.values) ++h[v];
  return h;
}

std::pair<Volume, LabelVolume> generate_phantom(const PhantomConfig& cfg) {
  const Shape3& s = cfg.shape;
  require(s.depth >= 16 && s.height >= 16 && s.width >= 16, ErrorKind::invalid_input,
          "phantom shape " + to_string(s) + " has a dimension below 16");
  require(cfg.n_structures >= 1 && cfg.n_structures <= kNumClasses - 1, ErrorKind::invalid_input,
          "n_structures must lie in [1,7]");
  require(cfg.noise_sigma >= 0.0 && std::isfinite(cfg.noise_sigma), ErrorKind::invalid_input, "noise_sigma must be >= 0");

  LabelVolume labels{Grid3<std::uint8_t>(s, 0)};
  // Resample the layout until every class keeps enough voxels after precedence.
  for (int attempt = 0;; ++attempt) {
    require(attempt < 1000, ErrorKind::invalid_input, "could not place structures with minimum coverage");
    Rng rng(derive_seed(cfg.seed, 0xe11, static_cast<std::uint64_t>(attempt)));
    std::vector<Ellipsoid> shapes;
    for (int k = 1; k <= cfg.n_structures; ++k) shapes.push_back(sample_ellipsoid(k, s, rng));

    std::fill(labels.labels.values.begin(), labels.labels.values.end(), std::uint8_t{0});
    for (Index z = 0; z < s.depth; ++z)
      for (Index y = 0; y < s.height; ++y)
        for (Index x = 0; x < s.width; ++x) {
          const Eigen::Vector3d p(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
          for (int k = cfg.n_structures; k >= 1; --k) {
            if (inside(shapes[static_cast<std::size_t>(k - 1)], p)) {
              labels.labels(z, y, x) = static_cast<std::uint8_t>(k);
              break;
            }
          }
        }
    const auto hist = class_histogram(labels);
    bool ok = true;
    for (int k = 1; k <= cfg.n_structures; ++k) ok = ok && hist[static_cast<std::size_t>(k)] >= kMinClassVoxels;
    if (ok) break;
  }

  Volume volume;
  volume.voxels = Grid3<float>(s);
  Rng noise_rng(derive_seed(cfg.seed, 0x7015e));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < volume.voxels.values.size(); ++i) {
    double v = phantom_class_mean(labels.labels.values[i]);
    if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(noise_rng);
    volume.voxels.values[i] = static_cast<float>(v);
  }
  return {std::move(volume), std::move(labels)};
}

std::vector<ManifestEntry> write_phantom_dataset(const std::filesystem::path& dir, int count, std::uint64_t seed,
                                                 PhantomConfig base) {
  require(count >= 1, ErrorKind::invalid_input, "phantom count must be positive");
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "phantom_%03d", i);
    PhantomConfig cfg = base;
    cfg.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    auto [volume, labels] = generate_phantom(cfg);
    volume.id = stem;
    ManifestEntry e{stem, dir / (std::string(stem) + ".nii.gz"), dir / (std::string(stem) + "_label.nii.gz")};
    write_nifti(e.image, volume);
    write_nifti(*e.label, labels);
    entries.push_back(std::move(e));
  }
  write_manifest(dir / "manifest.json", entries);
  return entries;
}

}  // namespace mmgl
