#include <algorithm>
#include <cmath>

#include "mmgl/eval.hpp"

namespace mmgl {
namespace {

struct Counts {
  std::int64_t inter = 0, pred = 0, truth = 0;
};

Counts count_class(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int c) {
  require(pred.size() == truth.size(), ErrorKind::shape_mismatch,
          "prediction has " + std::to_string(pred.size()) + " voxels, truth " + std::to_string(truth.size()));
  Counts n;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == c, g = truth[i] == c;
    n.pred += p;
    n.truth += g;
    n.inter += p && g;
  }
  return n;
}

}  // namespace

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int c) {
  const Counts n = count_class(pred, truth, c);
  if (n.pred + n.truth == 0) return 1.0;
  return 2.0 * static_cast<double>(n.inter) / static_cast<double>(n.pred + n.truth);
}

double iou_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int c) {
  const Counts n = count_class(pred, truth, c);
  const std::int64_t uni = n.pred + n.truth - n.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(n.inter) / static_cast<double>(uni);
}

double miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  require(pred.size() == truth.size(), ErrorKind::shape_mismatch, "miou shape mismatch");
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const Counts n = count_class(pred, truth, c);
    if (n.pred + n.truth == 0) continue;
    sum += static_cast<double>(n.inter) / static_cast<double>(n.pred + n.truth - n.inter);
    ++classes;
  }
  return classes == 0 ? 1.0 : sum / classes;
}

double pixel_accuracy(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  require(pred.size() == truth.size(), ErrorKind::shape_mismatch, "pixel_accuracy shape mismatch");
  if (pred.empty()) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) same += pred[i] == truth[i];
  return static_cast<double>(same) / static_cast<double>(pred.size());
}

double mean_present_dice(const MetricsRecord& r) {
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < kForegroundClasses; ++c)
    if (r.class_present[static_cast<std::size_t>(c)]) {
      sum += r.class_dice[static_cast<std::size_t>(c)];
      ++n;
    }
  return n == 0 ? 1.0 : sum / n;
}

MetricsRecord compute_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  MetricsRecord r;
  for (int c = 1; c < kNumClasses; ++c) {
    const Counts n = count_class(pred, truth, c);
    const auto i = static_cast<std::size_t>(c - 1);
    r.class_present[i] = n.pred + n.truth > 0;
    r.class_dice[i] = r.class_present[i] ? 2.0 * static_cast<double>(n.inter) / static_cast<double>(n.pred + n.truth) : 1.0;
  }
  r.mean_dice = mean_present_dice(r);
  r.miou = miou(pred, truth);
  r.pixacc = pixel_accuracy(pred, truth);
  return r;
}

LabelVolume predict_volume(const Model& model, const Volume& volume) {
  const Shape3& s = volume.shape();
  const Index size = model.config().input_size;
  LabelVolume out{Grid3<std::uint8_t>(s, 0)};
  for (auto& slice : slice_volume(volume, nullptr, ViewAxis::transaxial)) {
    const Image input = resize_slice(normalize_minmax(slice.image), size);
    const LabelGrid mask = resize_nearest(model.predict(input), s.height, s.width);
    place_slice(out.labels, ViewAxis::transaxial, slice.slice_index, mask);
  }
  return out;
}

MetricsRecord evaluate_volume(const Model& model, const Volume& volume, const LabelVolume* labels) {
  require(labels != nullptr, ErrorKind::invalid_input, "evaluation of " + volume.id + " needs labels");
  require(labels->shape() == volume.shape(), ErrorKind::shape_mismatch, "labels do not match volume " + volume.id);
  const LabelVolume pred = predict_volume(model, volume);
  MetricsRecord r = compute_metrics(as_span(pred), as_span(*labels));
  r.run = volume.id;
  return r;
}

double slice_mean_dice(const LabelVolume& pred, const LabelVolume& truth) {
  require(pred.shape() == truth.shape(), ErrorKind::shape_mismatch, "slice_mean_dice shape mismatch");
  const auto p = slice_volume(Volume{"", Grid3<float>(pred.shape())}, &pred, ViewAxis::transaxial);
  const auto t = slice_volume(Volume{"", Grid3<float>(truth.shape())}, &truth, ViewAxis::transaxial);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += compute_metrics(as_span(*p[i].mask), as_span(*t[i].mask)).mean_dice;
  return p.empty() ? 1.0 : sum / static_cast<double>(p.size());
}

MetricsRecord average_records(std::span<const MetricsRecord> records) {
  require(!records.empty(), ErrorKind::invalid_input, "no records to average");
  MetricsRecord out = records.front();
  std::array<double, kForegroundClasses> sum{};
  std::array<int, kForegroundClasses> n{};
  double md = 0, mi = 0, pa = 0;
  for (const auto& r : records) {
    for (std::size_t c = 0; c < sum.size(); ++c)
      if (r.class_present[c]) {
        sum[c] += r.class_dice[c];
        ++n[c];
      }
    md += r.mean_dice;
    mi += r.miou;
    pa += r.pixacc;
  }
  const auto k = static_cast<double>(records.size());
  for (std::size_t c = 0; c < sum.size(); ++c) {
    out.class_present[c] = n[c] > 0;
    out.class_dice[c] = n[c] > 0 ? sum[c] / n[c] : 1.0;
  }
  out.mean_dice = md / k;
  out.miou = mi / k;
  out.pixacc = pa / k;
  return out;
}

}  // namespace mmgl
