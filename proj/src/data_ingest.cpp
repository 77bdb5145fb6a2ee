#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmgl/data_ingest.hpp"
#include "mmgl/resample.hpp"

namespace mmgl {

using nlohmann::json;

std::string to_string(ViewAxis view) {
  switch (view) {
    case ViewAxis::transaxial: return "transaxial";
    case ViewAxis::coronal: return "coronal";
    case ViewAxis::sagittal: return "sagittal";
  }
  return "?";
}

ViewAxis parse_view(const std::string& text) {
  if (text == "t" || text == "transaxial" || text == "axial") return ViewAxis::transaxial;
  if (text == "c" || text == "coronal") return ViewAxis::coronal;
  if (text == "s" || text == "sagittal") return ViewAxis::sagittal;
  throw Error(ErrorKind::invalid_config, "unknown view '" + text + "'");
}

std::vector<ViewAxis> parse_views(const std::string& text) {
  std::vector<ViewAxis> views;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const ViewAxis v = parse_view(item);
    require(std::find(views.begin(), views.end(), v) == views.end(), ErrorKind::invalid_config,
            "duplicate view '" + item + "'");
    views.push_back(v);
  }
  require(!views.empty(), ErrorKind::invalid_config, "empty view list");
  return views;
}

void validate(const Volume& volume) {
  const Shape3& s = volume.shape();
  require(s.depth >= 8 && s.height >= 8 && s.width >= 8, ErrorKind::invalid_input,
          "volume " + volume.id + " shape " + to_string(s) + " below 8 voxels per axis");
  require(std::all_of(volume.voxels.values.begin(), volume.voxels.values.end(), [](float v) { return std::isfinite(v); }),
          ErrorKind::invalid_input, "volume " + volume.id + " has non-finite intensities");
}

void validate(const LabelVolume& labels) {
  require(std::all_of(labels.labels.values.begin(), labels.labels.values.end(),
                      [](std::uint8_t v) { return v < kNumClasses; }),
          ErrorKind::invalid_input, "label outside 0..7");
}

LoadedVolume load_volume(const std::filesystem::path& image, const std::optional<std::filesystem::path>& label,
                         std::string id) {
  LoadedVolume out;
  out.volume = read_nifti_volume(image);
  if (!id.empty()) out.volume.id = std::move(id);
  validate(out.volume);
  if (label) {
    out.labels = read_nifti_labels(*label);
    require(out.labels->shape() == out.volume.shape(), ErrorKind::shape_mismatch,
            "image " + to_string(out.volume.shape()) + " vs label " + to_string(out.labels->shape()));
  }
  return out;
}

Index slice_count(const Shape3& shape, ViewAxis axis) {
  switch (axis) {
    case ViewAxis::transaxial: return shape.depth;
    case ViewAxis::coronal: return shape.height;
    case ViewAxis::sagittal: return shape.width;
  }
  return 0;
}

namespace {

template <typename T>
Grid<T> extract(const Grid3<T>& g, ViewAxis axis, Index i) {
  const Shape3& s = g.shape;
  Grid<T> out;
  switch (axis) {
    case ViewAxis::transaxial:
      out.resize(s.height, s.width);
      for (Index y = 0; y < s.height; ++y)
        for (Index x = 0; x < s.width; ++x) out(y, x) = g(i, y, x);
      break;
    case ViewAxis::coronal:
      out.resize(s.depth, s.width);
      for (Index z = 0; z < s.depth; ++z)
        for (Index x = 0; x < s.width; ++x) out(z, x) = g(z, i, x);
      break;
    case ViewAxis::sagittal:
      out.resize(s.depth, s.height);
      for (Index z = 0; z < s.depth; ++z)
        for (Index y = 0; y < s.height; ++y) out(z, y) = g(z, y, i);
      break;
  }
  return out;
}

}  // namespace

std::vector<SliceSample> slice_volume(const Volume& volume, const LabelVolume* labels, ViewAxis axis) {
  validate(volume);
  if (labels) {
    require(labels->shape() == volume.shape(), ErrorKind::shape_mismatch, "labels do not match volume " + volume.id);
  }
  const Index n = slice_count(volume.shape(), axis);
  std::vector<SliceSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    SliceSample s;
    s.image = extract(volume.voxels, axis, i);
    s.view = axis;
    s.volume_id = volume.id;
    s.slice_index = i;
    if (labels) s.mask = extract(labels->labels, axis, i);
    out.push_back(std::move(s));
  }
  return out;
}

Image normalize_minmax(const Image& img) {
  require(img.allFinite(), ErrorKind::invalid_input, "normalize_minmax on non-finite values");
  if (img.size() == 0) return img;
  const float lo = img.minCoeff();
  const float hi = img.maxCoeff();
  if (!(hi > lo)) return Image::Zero(img.rows(), img.cols());
  Image out = ((img.array() - lo) / (hi - lo)).matrix();
  // Guard against rounding just outside the unit interval.
  return out.cwiseMax(0.0f).cwiseMin(1.0f);
}

Image resize_slice(const Image& img, Index size) {
  require(img.rows() >= 2 && img.cols() >= 2, ErrorKind::invalid_input, "resize_slice needs at least 2x2 input");
  return resize_bilinear(img, size, size);
}

LabelGrid resize_mask(const LabelGrid& mask, Index size) { return resize_nearest(mask, size, size); }

SliceSample prepare_slice(SliceSample raw, Index size) {
  raw.image = resize_slice(normalize_minmax(raw.image), size);
  if (raw.mask) raw.mask = resize_mask(*raw.mask, size);
  return raw;
}

DatasetSplit split_dataset(std::vector<std::string> ids, double labeled_fraction, std::uint64_t seed) {
  require(ids.size() >= 4, ErrorKind::invalid_input, "split_dataset needs at least 4 ids, got " + std::to_string(ids.size()));
  require(labeled_fraction > 0.0 && labeled_fraction <= 1.0, ErrorKind::invalid_input, "labeled_fraction must lie in (0,1]");
  std::sort(ids.begin(), ids.end());
  require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), ErrorKind::invalid_input, "duplicate volume ids");

  Rng rng(derive_seed(seed, 0x5e11));
  std::shuffle(ids.begin(), ids.end(), rng);

  const std::size_t n = ids.size();
  const std::size_t n_train = (n + 1) / 2;
  const std::size_t n_val = (n - n_train) / 2;

  DatasetSplit split;
  split.seed = seed;
  split.labeled_fraction = labeled_fraction;
  split.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                       ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());

  const auto wanted = static_cast<std::size_t>(std::ceil(labeled_fraction * static_cast<double>(n_train) - 1e-9));
  const std::size_t n_labeled = std::clamp<std::size_t>(wanted, 1, n_train);
  std::vector<std::string> pool = split.train_ids;
  Rng pick(derive_seed(seed, 0x1abe1));
  std::shuffle(pool.begin(), pool.end(), pick);
  split.labeled_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  return split;
}

LabelGrid downsample_labels(const LabelGrid& mask, Index stride) {
  require(stride >= 1 && mask.rows() % stride == 0 && mask.cols() % stride == 0, ErrorKind::invalid_input,
          "stride " + std::to_string(stride) + " does not divide " + std::to_string(mask.rows()) + "x" +
              std::to_string(mask.cols()));
  if (stride == 1) return mask;
  LabelGrid out(mask.rows() / stride, mask.cols() / stride);
  for (Index y = 0; y < out.rows(); ++y)
    for (Index x = 0; x < out.cols(); ++x) out(y, x) = mask(y * stride, x * stride);
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::unreadable_format, path.string() + ": " + e.what());
  }
  require(doc.contains("volumes") && doc["volumes"].is_array(), ErrorKind::unreadable_format,
          path.string() + " has no 'volumes' array");
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  for (const auto& v : doc["volumes"]) {
    ManifestEntry e;
    e.id = v.at("id").get<std::string>();
    require(seen.insert(e.id).second, ErrorKind::invalid_input, "duplicate id " + e.id + " in manifest");
    std::filesystem::path img = v.at("image").get<std::string>();
    e.image = img.is_absolute() ? img : base / img;
    if (v.contains("label") && !v["label"].is_null()) {
      std::filesystem::path lab = v["label"].get<std::string>();
      e.label = lab.is_absolute() ? lab : base / lab;
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  const auto base = path.parent_path();
  json vols = json::array();
  for (const auto& e : entries) {
    json v;
    v["id"] = e.id;
    v["image"] = std::filesystem::relative(e.image, base).generic_string();
    v["label"] = e.label ? json(std::filesystem::relative(*e.label, base).generic_string()) : json(nullptr);
    vols.push_back(v);
  }
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << json{{"volumes", vols}}.dump(2) << "\n";
}

void write_split(const std::filesystem::path& path, const DatasetSplit& split) {
  json doc{{"train", split.train_ids},
           {"val", split.val_ids},
           {"test", split.test_ids},
           {"labeled", split.labeled_ids},
           {"labeled_fraction", split.labeled_fraction},
           {"seed", split.seed}};
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

DatasetSplit read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, path.string());
  try {
    json doc;
    in >> doc;
    DatasetSplit s;
    s.train_ids = doc.at("train").get<std::vector<std::string>>();
    s.val_ids = doc.at("val").get<std::vector<std::string>>();
    s.test_ids = doc.at("test").get<std::vector<std::string>>();
    s.labeled_ids = doc.at("labeled").get<std::vector<std::string>>();
    s.seed = doc.at("seed").get<std::uint64_t>();
    s.labeled_fraction = doc.value("labeled_fraction", 1.0);
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::unreadable_format, path.string() + ": " + e.what());
  }
}

}  // namespace mmgl
