#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmgl/data_ingest.hpp"
#include "mmgl/model.hpp"

namespace mmgl {

/// Which candidates enter the softmax denominator of the global loss.
///  standard:   k != i (the anchor itself is excluded, the positive is included)
///  as_written: k != j (the positive is excluded, the anchor's self-similarity is included)
enum class DenominatorMode { standard, as_written };

std::string to_string(DenominatorMode mode);
DenominatorMode parse_denominator_mode(const std::string& text);

struct ContrastiveConfig {
  double temperature = 0.07;
  DenominatorMode denominator_mode = DenominatorMode::standard;
  int max_points_per_class = 512;

  void validate() const {
    require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::invalid_config, "temperature must be positive");
    require(max_points_per_class >= 2, ErrorKind::invalid_config, "max_points_per_class must be >= 2");
  }
};

using WeightTriple = std::array<double, kHeadCount>;

inline constexpr WeightTriple kDefaultLevelWeights{0.2, 0.2, 0.6};

/// Balancing weights over the three head levels, ordered shallow-to-deep for the
/// encoder and coarse-to-fine for the decoder.
struct LossWeights {
  WeightTriple global = kDefaultLevelWeights;
  WeightTriple local = kDefaultLevelWeights;
  WeightTriple dice = kDefaultLevelWeights;

  void validate() const;
};

void validate_weight_triple(const WeightTriple& w, const std::string& name);

/// Parses an "a:b:c" portfolio and normalises it to sum to one, e.g. 2:3:5 -> (0.2,0.3,0.5).
WeightTriple parse_portfolio(const std::string& text);

// ---------------------------------------------------------------------------

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_sim(const Eigen::MatrixBase<DerivedA>& u, const Eigen::MatrixBase<DerivedB>& v) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar nu = u.norm(), nv = v.norm();
  require(nu > Scalar(0) && nv > Scalar(0), ErrorKind::invalid_input, "cosine similarity of a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), Scalar(-1), Scalar(1));
}

inline void validate_pairing(std::span<const int> partner) {
  const auto n = static_cast<int>(partner.size());
  require(n >= 4 && n % 2 == 0, ErrorKind::invalid_input, "global contrastive loss needs at least 2 positive pairs");
  for (int i = 0; i < n; ++i) {
    const int j = partner[static_cast<std::size_t>(i)];
    require(j >= 0 && j < n && j != i && partner[static_cast<std::size_t>(j)] == i, ErrorKind::invalid_input,
            "pairing is not a perfect matching");
  }
}

/// NT-Xent over 2b embeddings (one per row). Returns the mean over all anchors of
/// -log(exp(sim(i,j)/tau) / sum_k exp(sim(i,k)/tau)), with the candidate set k
/// chosen by `cfg.denominator_mode`. Optionally writes dL/d(embeddings).
template <typename Scalar>
Scalar global_contrastive_level_loss(const Grid<Scalar>& embeddings, std::span<const int> partner, const ContrastiveConfig& cfg,
                                     Grid<Scalar>* grad = nullptr) {
  cfg.validate();
  validate_pairing(partner);
  const Index n = embeddings.rows();
  require(n == static_cast<Index>(partner.size()), ErrorKind::invalid_input, "pairing size differs from batch size");

  const Eigen::Array<Scalar, Eigen::Dynamic, 1> norms = embeddings.rowwise().norm().array();
  require((norms > Scalar(0)).all(), ErrorKind::invalid_input, "zero embedding");
  const Grid<Scalar> unit = (embeddings.array().colwise() / norms).matrix();
  const auto inv_tau = static_cast<Scalar>(1.0 / cfg.temperature);
  const Grid<Scalar> logits = unit * unit.transpose() * inv_tau;

  // excluded(i) is the single index left out of row i's denominator.
  const bool standard = cfg.denominator_mode == DenominatorMode::standard;
  Grid<Scalar> soft = Grid<Scalar>::Zero(n, n);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Index j = partner[static_cast<std::size_t>(i)];
    const Index excluded = standard ? i : j;
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < n; ++k)
      if (k != excluded) m = std::max(m, logits(i, k));
    Scalar z = 0;
    for (Index k = 0; k < n; ++k)
      if (k != excluded) {
        soft(i, k) = std::exp(logits(i, k) - m);
        z += soft(i, k);
      }
    soft.row(i) /= z;
    total += m + std::log(z) - logits(i, j);
  }
  const Scalar loss = total / static_cast<Scalar>(n);

  if (grad) {
    Grid<Scalar> g = soft;  // dL/dlogits before the 1/n factor
    for (Index i = 0; i < n; ++i) g(i, partner[static_cast<std::size_t>(i)]) -= Scalar(1);
    g /= static_cast<Scalar>(n);
    const Grid<Scalar> d_unit = (g + g.transpose()) * unit * inv_tau;
    // Back through row normalisation.
    const Eigen::Array<Scalar, Eigen::Dynamic, 1> proj = (unit.array() * d_unit.array()).rowwise().sum();
    *grad = ((d_unit.array() - unit.array().colwise() * proj).colwise() / norms).matrix();
  }
  return loss;
}

/// Weighted sum over levels; used for the multi-scale global, local and Dice totals.
template <typename Scalar>
Scalar multiscale_sum(std::span<const Scalar> per_level, std::span<const double> weights) {
  require(per_level.size() == weights.size(), ErrorKind::invalid_input,
          "level count " + std::to_string(per_level.size()) + " does not match weight count " + std::to_string(weights.size()));
  Scalar total = 0;
  for (std::size_t i = 0; i < per_level.size(); ++i) total += static_cast<Scalar>(weights[i]) * per_level[i];
  return total;
}

template <typename Scalar>
Scalar multiscale_global_loss(std::span<const Scalar> per_level, const WeightTriple& w) {
  return multiscale_sum<Scalar>(per_level, w);
}

template <typename Scalar>
Scalar multiscale_local_loss(std::span<const Scalar> per_level, const WeightTriple& w) {
  return multiscale_sum<Scalar>(per_level, w);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct LocalLossResult {
  Scalar value = 0;
  /// Fewer than two classes among the points: no anchor has negatives.
  bool degenerate = false;
  Index anchors = 0;
};

/// Indices kept after capping every class at `cap` points (seeded, order-preserving).
std::vector<Index> cap_points_per_class(std::span<const std::uint8_t> labels, int cap, std::uint64_t seed);

/// Supervised pixel contrast on one feature map, following the printed form
///   -1/|Omega| sum_i 1/|P(i)| log( sum_{p in P(i)} exp(f_i.f_p/tau) / sum_{n in N(i)} exp(f_i.f_n/tau) ).
/// `features` is dim x points (unit columns), `labels` one class per point.
/// P(i) excludes i; anchors without positives or negatives leave Omega.
template <typename Scalar>
LocalLossResult<Scalar> local_supervised_level_loss(const Grid<Scalar>& features, std::span<const std::uint8_t> labels,
                                                    const ContrastiveConfig& cfg, std::uint64_t seed = 0,
                                                    Grid<Scalar>* grad = nullptr) {
  cfg.validate();
  require(features.cols() == static_cast<Index>(labels.size()), ErrorKind::shape_mismatch, "features and labels disagree on point count");
  if (grad) *grad = Grid<Scalar>::Zero(features.rows(), features.cols());

  const std::vector<Index> keep = cap_points_per_class(labels, cfg.max_points_per_class, seed);
  const auto n = static_cast<Index>(keep.size());
  std::vector<std::uint8_t> cls(keep.size());
  Grid<Scalar> f(features.rows(), n);
  for (Index a = 0; a < n; ++a) {
    cls[static_cast<std::size_t>(a)] = labels[static_cast<std::size_t>(keep[static_cast<std::size_t>(a)])];
    f.col(a) = features.col(keep[static_cast<std::size_t>(a)]);
  }

  std::array<Index, 256> count{};
  for (auto c : cls) ++count[c];
  const auto distinct = std::count_if(count.begin(), count.end(), [](Index c) { return c > 0; });
  LocalLossResult<Scalar> result;
  if (distinct < 2) {
    result.degenerate = true;
    return result;
  }

  const auto inv_tau = static_cast<Scalar>(1.0 / cfg.temperature);
  const Grid<Scalar> logits = f.transpose() * f * inv_tau;
  Grid<Scalar> g = Grid<Scalar>::Zero(n, n);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const auto ci = cls[static_cast<std::size_t>(i)];
    const Index n_pos = count[ci] - 1;
    const Index n_neg = n - count[ci];
    if (n_pos == 0 || n_neg == 0) continue;
    ++result.anchors;
    Scalar m_pos = -std::numeric_limits<Scalar>::infinity(), m_neg = m_pos;
    for (Index k = 0; k < n; ++k) {
      if (k == i) continue;
      if (cls[static_cast<std::size_t>(k)] == ci) m_pos = std::max(m_pos, logits(i, k));
      else m_neg = std::max(m_neg, logits(i, k));
    }
    Scalar z_pos = 0, z_neg = 0;
    for (Index k = 0; k < n; ++k) {
      if (k == i) continue;
      const bool pos = cls[static_cast<std::size_t>(k)] == ci;
      const Scalar e = std::exp(logits(i, k) - (pos ? m_pos : m_neg));
      g(i, k) = pos ? -e : e;  // softmax numerators, signed; normalised below
      (pos ? z_pos : z_neg) += e;
    }
    const Scalar inv_p = Scalar(1) / static_cast<Scalar>(n_pos);
    total += inv_p * ((m_pos + std::log(z_pos)) - (m_neg + std::log(z_neg)));
    for (Index k = 0; k < n; ++k) {
      if (k == i) continue;
      g(i, k) *= inv_p / (cls[static_cast<std::size_t>(k)] == ci ? z_pos : z_neg);
    }
  }
  if (result.anchors == 0) {
    result.degenerate = true;
    return result;
  }
  const auto omega = static_cast<Scalar>(result.anchors);
  result.value = -total / omega;
  if (grad) {
    g /= omega;
    const Grid<Scalar> df = f * (g + g.transpose()) * inv_tau;
    for (Index a = 0; a < n; ++a) grad->col(keep[static_cast<std::size_t>(a)]) = df.col(a);
  }
  return result;
}

/// Labels for a local feature map: the mask sampled at the feature grid's top-left anchors.
inline LabelGrid labels_for_feature_grid(const LabelGrid& mask, Index height, Index width) {
  require(mask.rows() % height == 0 && mask.cols() % width == 0 && mask.rows() / height == mask.cols() / width,
          ErrorKind::shape_mismatch, "mask does not align with the feature grid");
  return downsample_labels(mask, mask.rows() / height);
}

template <typename Scalar>
LocalLossResult<Scalar> local_supervised_level_loss(const LocalFeatureMap<Scalar>& f, const LabelGrid& mask, const ContrastiveConfig& cfg,
                                                    std::uint64_t seed = 0, Grid<Scalar>* grad = nullptr) {
  const LabelGrid labels = labels_for_feature_grid(mask, f.height, f.width);
  return local_supervised_level_loss<Scalar>(f.features, std::span<const std::uint8_t>(labels.data(), static_cast<std::size_t>(labels.size())),
                                             cfg, seed, grad);
}

/// Mean of the per-sample local loss over an augmented batch (one level).
/// `grads`, when given, receives dL/d(features) for each sample.
template <typename Scalar>
Scalar local_supervised_batch_loss(const std::vector<LocalFeatureMap<Scalar>>& features, const std::vector<const LabelGrid*>& masks,
                                   const ContrastiveConfig& cfg, std::uint64_t seed = 0,
                                   std::vector<Grid<Scalar>>* grads = nullptr, int* degenerate = nullptr) {
  require(!features.empty() && features.size() == masks.size(), ErrorKind::invalid_input, "batch and mask counts differ");
  Scalar total = 0;
  if (grads) grads->assign(features.size(), {});
  for (std::size_t a = 0; a < features.size(); ++a) {
    require(masks[a] != nullptr, ErrorKind::invalid_input, "local loss sample without mask");
    const auto r = local_supervised_level_loss(features[a], *masks[a], cfg, derive_seed(seed, a), grads ? &(*grads)[a] : nullptr);
    if (r.degenerate && degenerate) ++*degenerate;
    total += r.value;
  }
  const auto inv = Scalar(1) / static_cast<Scalar>(features.size());
  if (grads)
    for (auto& g : *grads) g *= inv;
  return total * inv;
}

// ---------------------------------------------------------------------------

inline constexpr double kDiceEpsilon = 1e-5;

/// Per-pixel softmax over the channel axis of a (classes x pixels) logit matrix.
template <typename Scalar>
Grid<Scalar> softmax_channels(const Grid<Scalar>& logits) {
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> m = logits.colwise().maxCoeff().array();
  Grid<Scalar> e = (logits.array().rowwise() - m).exp().matrix();
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> z = e.colwise().sum().array();
  return (e.array().rowwise() / z).matrix();
}

/// Soft Dice loss over foreground classes 1..C-1:
///   1 - mean_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps),
/// where a class enters the mean only if it occurs in the mask or in the argmax prediction.
/// With no such class the loss is 0.
template <typename Scalar>
Scalar dice_loss(const FeatureMap<Scalar>& logits, const LabelGrid& mask, FeatureMap<Scalar>* grad = nullptr) {
  require(logits.height == mask.rows() && logits.width == mask.cols(), ErrorKind::shape_mismatch,
          "logits " + std::to_string(logits.height) + "x" + std::to_string(logits.width) + " vs mask " +
              std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  const Index classes = logits.channels();
  const Index pixels = logits.pixels();
  const Grid<Scalar> p = softmax_channels(logits.data);

  std::vector<char> present(static_cast<std::size_t>(classes), 0);
  for (Index px = 0; px < pixels; ++px) {
    const auto g = mask.data()[px];
    require(g < classes, ErrorKind::invalid_input, "mask class outside logit channels");
    present[g] = 1;
    Index best = 0;
    p.col(px).maxCoeff(&best);
    present[static_cast<std::size_t>(best)] = 1;
  }

  const auto eps = static_cast<Scalar>(kDiceEpsilon);
  std::vector<Index> used;
  for (Index c = 1; c < classes; ++c)
    if (present[static_cast<std::size_t>(c)]) used.push_back(c);
  if (grad) *grad = FeatureMap<Scalar>(classes, logits.height, logits.width);
  if (used.empty()) return Scalar(0);

  Grid<Scalar> d_p = grad ? Grid<Scalar>::Zero(classes, pixels) : Grid<Scalar>();
  Scalar dice_sum = 0;
  const auto inv_used = Scalar(1) / static_cast<Scalar>(used.size());
  for (const Index c : used) {
    Scalar inter = 0, sum_p = 0, sum_g = 0;
    for (Index px = 0; px < pixels; ++px) {
      const bool g = mask.data()[px] == c;
      sum_p += p(c, px);
      if (g) {
        inter += p(c, px);
        sum_g += Scalar(1);
      }
    }
    const Scalar num = Scalar(2) * inter + eps;
    const Scalar den = sum_p + sum_g + eps;
    dice_sum += num / den;
    if (grad) {
      // d(num/den)/dp_c(x) = (2 g(x) den - num) / den^2
      const Scalar inv_den2 = Scalar(1) / (den * den);
      for (Index px = 0; px < pixels; ++px) {
        const Scalar g = mask.data()[px] == c ? Scalar(1) : Scalar(0);
        d_p(c, px) = -inv_used * (Scalar(2) * g * den - num) * inv_den2;
      }
    }
  }
  if (grad) {
    // Softmax backward: dz_k = p_k (dp_k - sum_c p_c dp_c).
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> dot = (p.array() * d_p.array()).colwise().sum();
    grad->data = (p.array() * (d_p.array().rowwise() - dot)).matrix();
  }
  return Scalar(1) - dice_sum * inv_used;
}

/// Weighted sum of per-level Dice losses against the full-resolution mask.
template <typename Scalar>
Scalar deep_supervised_loss(const SegLogits<Scalar>& logits, const LabelGrid& mask, std::span<const double> weights,
                            SegLogits<Scalar>* grads = nullptr, std::array<Scalar, kHeadCount>* per_level = nullptr) {
  require(weights.size() == logits.size(), ErrorKind::invalid_input, "deep supervision needs one weight per level");
  std::array<Scalar, kHeadCount> levels{};
  for (std::size_t h = 0; h < logits.size(); ++h) {
    if (weights[h] == 0.0) {
      if (grads) (*grads)[h] = FeatureMap<Scalar>();
      continue;
    }
    FeatureMap<Scalar>* g = grads ? &(*grads)[h] : nullptr;
    levels[h] = dice_loss(logits[h], mask, g);
    if (g) g->data *= static_cast<Scalar>(weights[h]);
  }
  if (per_level) *per_level = levels;
  return multiscale_sum<Scalar>(levels, weights);
}

}  // namespace mmgl
