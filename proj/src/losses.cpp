#include <sstream>

#include "mmgl/losses.hpp"

namespace mmgl {

std::string to_string(DenominatorMode mode) { return mode == DenominatorMode::standard ? "standard" : "as-written"; }

DenominatorMode parse_denominator_mode(const std::string& text) {
  if (text == "standard") return DenominatorMode::standard;
  if (text == "as-written" || text == "as_written") return DenominatorMode::as_written;
  throw Error(ErrorKind::invalid_config, "unknown global loss mode '" + text + "' (expected standard or as-written)");
}

void validate_weight_triple(const WeightTriple& w, const std::string& name) {
  double sum = 0.0;
  for (double v : w) {
    require(v >= 0.0 && std::isfinite(v), ErrorKind::invalid_config, name + " weights must be non-negative");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorKind::invalid_config, name + " weights must sum to 1, got " + std::to_string(sum));
}

void LossWeights::validate() const {
  validate_weight_triple(global, "global");
  validate_weight_triple(local, "local");
  validate_weight_triple(dice, "dice");
}

WeightTriple parse_portfolio(const std::string& text) {
  std::stringstream ss(text);
  std::string item;
  std::vector<double> parts;
  while (std::getline(ss, item, ':')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(item, &used));
      require(used == item.size(), ErrorKind::invalid_config, "bad portfolio entry '" + item + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::invalid_config, "bad portfolio entry '" + item + "' in '" + text + "'");
    }
  }
  require(parts.size() == kHeadCount, ErrorKind::invalid_config, "portfolio '" + text + "' needs three entries a:b:c");
  double sum = 0.0;
  for (double v : parts) {
    require(v >= 0.0 && std::isfinite(v), ErrorKind::invalid_config, "portfolio entries must be non-negative");
    sum += v;
  }
  require(sum > 0.0, ErrorKind::invalid_config, "portfolio '" + text + "' sums to zero");
  WeightTriple w{};
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = parts[i] / sum;
  return w;
}

std::vector<Index> cap_points_per_class(std::span<const std::uint8_t> labels, int cap, std::uint64_t seed) {
  std::array<std::vector<Index>, 256> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Index>(i));
  std::vector<Index> keep;
  keep.reserve(labels.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pts = by_class[c];
    if (static_cast<int>(pts.size()) > cap) {
      Rng rng(derive_seed(seed, c));
      std::shuffle(pts.begin(), pts.end(), rng);
      pts.resize(static_cast<std::size_t>(cap));
    }
    keep.insert(keep.end(), pts.begin(), pts.end());
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace mmgl
