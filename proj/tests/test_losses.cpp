#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmgl/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mmgl;
using support::rows_of;
using support::cols_of;

namespace {

ContrastiveConfig cfg_with(double tau, DenominatorMode mode = DenominatorMode::standard) {
  ContrastiveConfig c;
  c.temperature = tau;
  c.denominator_mode = mode;
  return c;
}

std::vector<std::uint8_t> as_bytes(const std::vector<int>& v) { return {v.begin(), v.end()}; }

template <typename Scalar>
FeatureMap<Scalar> logits_of(const std::vector<oracle::Vec>& per_class, Index h, Index w) {
  return FeatureMap<Scalar>(rows_of<Scalar>(per_class), h, w);
}

LabelGrid mask_of(const std::vector<int>& v, Index h, Index w) {
  LabelGrid m(h, w);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<std::uint8_t>(v[static_cast<std::size_t>(i)]);
  return m;
}

// Central differences of f at x, one coordinate at a time.
template <typename F>
Grid<double> numeric_grad(Grid<double> x, F&& f, double step = 1e-3) {
  Grid<double> g(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + step;
    const double up = f(x);
    x.data()[i] = keep - step;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * step);
  }
  return g;
}

double rel_err(const Grid<double>& a, const Grid<double>& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

}  // namespace

TEST_CASE("cosine similarity") {
  Eigen::Vector2d a(1, 0), b(0, 1), v(0.3, -2.0);
  CHECK(cosine_sim(v, v) == doctest::Approx(1.0));
  CHECK(cosine_sim(v, Eigen::Vector2d(-v)) == doctest::Approx(-1.0));
  CHECK(cosine_sim(a, b) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cosine_sim(a, Eigen::Vector2d::Zero().eval()), Error);
}

TEST_CASE("global loss closed forms") {
  const std::vector<int> pairs{1, 0, 3, 2};
  for (double tau : {0.07, 0.5, 1.0, 3.0}) {
    Grid<double> same(4, 3);
    same.rowwise() = Eigen::RowVector3d(0.2, -1.0, 0.5);
    CHECK(global_contrastive_level_loss(same, pairs, cfg_with(tau)) == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  }
  Grid<double> clusters(4, 2);
  clusters << 1, 0, 1, 0, 0, 1, 0, 1;
  const double e = std::exp(1.0);
  CHECK(std::abs(global_contrastive_level_loss(clusters, pairs, cfg_with(1.0)) - -std::log(e / (e + 2))) < 1e-4);
  CHECK(-std::log(e / (e + 2)) == doctest::Approx(0.5514).epsilon(1e-4));
}

TEST_CASE("global loss matches the double-loop oracle on random float32 batches") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pair_count(2, 6), dim(3, 16);
  for (auto mode : {DenominatorMode::standard, DenominatorMode::as_written}) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 * pair_count(rng);
      const auto z = support::rounded<float>(support::random_vectors(rng, n, dim(rng), trial % 2 == 0));
      const auto partner = support::adjacent_pairs(n);
      const float got = global_contrastive_level_loss(rows_of<float>(z), partner, cfg_with(0.07, mode));
      worst = std::max(worst, std::abs(got - oracle::nt_xent(z, partner, 0.07, mode == DenominatorMode::as_written)));
    }
    CAPTURE(to_string(mode));
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("global loss bounds and the uniform limit") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = support::random_vectors(rng, 8, 5, false);
    const double v = global_contrastive_level_loss(rows_of<double>(z), support::adjacent_pairs(8), cfg_with(0.07));
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
  }
  // As tau grows every similarity looks alike and the loss tends to log(2b-1).
  const auto z = support::random_vectors(rng, 12, 4, true);
  const double big = global_contrastive_level_loss(rows_of<double>(z), support::adjacent_pairs(12), cfg_with(1e6));
  CHECK(big == doctest::Approx(std::log(11.0)).epsilon(1e-5));
}

TEST_CASE("global loss is invariant to a consistent permutation") {
  std::mt19937_64 rng(5);
  const int n = 10;
  const auto z = support::random_vectors(rng, n, 6, false);
  const auto partner = support::adjacent_pairs(n);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> where(n);
  for (int k = 0; k < n; ++k) where[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = k;
  std::vector<oracle::Vec> zp(n);
  std::vector<int> pp(n);
  for (int k = 0; k < n; ++k) {
    zp[static_cast<std::size_t>(k)] = z[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
    pp[static_cast<std::size_t>(k)] = where[static_cast<std::size_t>(partner[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])])];
  }
  for (auto mode : {DenominatorMode::standard, DenominatorMode::as_written})
    CHECK(global_contrastive_level_loss(rows_of<double>(zp), pp, cfg_with(0.3, mode)) ==
          doctest::Approx(global_contrastive_level_loss(rows_of<double>(z), partner, cfg_with(0.3, mode))).epsilon(1e-12));
}

TEST_CASE("coinciding positives with antipodal negatives minimise the global loss") {
  Grid<double> best(4, 2);
  best << 1, 0, 1, 0, -1, 0, -1, 0;
  const std::vector<int> pairs{1, 0, 3, 2};
  const double target = global_contrastive_level_loss(best, pairs, cfg_with(0.5));
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto z = support::random_vectors(rng, 4, 2, true);
    CHECK(global_contrastive_level_loss(rows_of<double>(z), pairs, cfg_with(0.5)) >= target - 1e-12);
  }
  Grid<double> orth(4, 2);
  orth << 1, 0, 1, 0, 0, 1, 0, 1;
  CHECK(global_contrastive_level_loss(orth, pairs, cfg_with(0.5)) > target);
}

TEST_CASE("global loss rejects bad batches") {
  Grid<double> two(2, 3);
  two.setRandom();
  CHECK_THROWS_AS(global_contrastive_level_loss(two, std::vector<int>{1, 0}, cfg_with(0.1)), Error);
  Grid<double> four = Grid<double>::Random(4, 3);
  CHECK_THROWS_AS(global_contrastive_level_loss(four, std::vector<int>{1, 2, 3, 0}, cfg_with(0.1)), Error);
  CHECK_THROWS_AS(global_contrastive_level_loss(four, std::vector<int>{1, 0, 3, 2, 5, 4}, cfg_with(0.1)), Error);
  four.row(2).setZero();
  CHECK_THROWS_AS(global_contrastive_level_loss(four, std::vector<int>{1, 0, 3, 2}, cfg_with(0.1)), Error);
  CHECK_THROWS_AS(cfg_with(0.0).validate(), Error);
  CHECK(parse_denominator_mode("as-written") == DenominatorMode::as_written);
  CHECK(parse_denominator_mode("standard") == DenominatorMode::standard);
  CHECK_THROWS_AS(parse_denominator_mode("simclr"), Error);
}

TEST_CASE("global loss gradient matches finite differences") {
  std::mt19937_64 rng(21);
  for (auto mode : {DenominatorMode::standard, DenominatorMode::as_written}) {
    const Grid<double> z = rows_of<double>(support::random_vectors(rng, 8, 5, false));
    const auto partner = support::adjacent_pairs(8);
    const auto cfg = cfg_with(0.5, mode);
    Grid<double> analytic;
    global_contrastive_level_loss(z, partner, cfg, &analytic);
    const auto numeric = numeric_grad(z, [&](const Grid<double>& x) { return global_contrastive_level_loss(x, partner, cfg); });
    CHECK(rel_err(analytic, numeric) < 1e-2);
  }
}

TEST_CASE("multiscale sums") {
  const std::array<double, 3> ones{1, 1, 1}, tail{0, 0, 2}, head{1, 0, 0};
  CHECK(multiscale_global_loss<double>(ones, kDefaultLevelWeights) == doctest::Approx(1.0));
  CHECK(multiscale_global_loss<double>(tail, kDefaultLevelWeights) == doctest::Approx(1.2));
  CHECK(multiscale_local_loss<double>(head, kDefaultLevelWeights) == doctest::Approx(0.2));
  const std::array<double, 2> short_w{0.5, 0.5};
  CHECK_THROWS_AS(multiscale_sum<double>(ones, short_w), Error);
  LossWeights w;
  CHECK(w.global == WeightTriple{0.2, 0.2, 0.6});
  CHECK(w.local == WeightTriple{0.2, 0.2, 0.6});
  CHECK(w.dice == WeightTriple{0.2, 0.2, 0.6});
}

TEST_CASE("portfolio parsing") {
  const auto w = parse_portfolio("2:3:5");
  CHECK(w[0] == doctest::Approx(0.2));
  CHECK(w[1] == doctest::Approx(0.3));
  CHECK(w[2] == doctest::Approx(0.5));
  const auto d = parse_portfolio("0.2:0.2:0.6");
  CHECK(d[2] == doctest::Approx(0.6));
  for (const char* bad : {"1:2", "1:2:3:4", "a:b:c", "0:0:0", "-1:1:1", "1::2"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_portfolio(bad), Error);
  }
  CHECK_THROWS_AS(validate_weight_triple({0.5, 0.5, 0.5}, "w"), Error);
  CHECK_THROWS_AS(validate_weight_triple({-0.2, 0.6, 0.6}, "w"), Error);
}

TEST_CASE("local loss closed forms") {
  Grid<double> f(2, 4);
  f << 1, 1, 0, 0, 0, 0, 1, 1;
  const auto r = local_supervised_level_loss(f, as_bytes({0, 0, 1, 1}), cfg_with(1.0));
  CHECK_FALSE(r.degenerate);
  CHECK(r.anchors == 4);
  CHECK(std::abs(r.value - -(1 - std::log(2.0))) < 1e-4);
  CHECK(r.value == doctest::Approx(-0.3069).epsilon(1e-3));

  const auto single = local_supervised_level_loss(f, as_bytes({3, 3, 3, 3}), cfg_with(1.0));
  CHECK(single.degenerate);
  CHECK(single.value == 0.0);

  // Two classes but every class a singleton: no anchor has a positive.
  const auto lonely = local_supervised_level_loss(Grid<double>(f.leftCols(2)), as_bytes({0, 1}), cfg_with(1.0));
  CHECK(lonely.degenerate);
  CHECK(lonely.value == 0.0);

  CHECK_THROWS_AS(local_supervised_level_loss(f, as_bytes({0, 1}), cfg_with(1.0)), Error);
}

TEST_CASE("local loss matches the triple-loop oracle on random float32 grids") {
  std::mt19937_64 rng(13);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = support::rounded<float>(support::random_vectors(rng, 36, 8, true));
    const auto cls = support::random_labels(rng, 36, 3);
    bool oracle_degenerate = false;
    const double want = oracle::local_loss(f, cls, 0.07, &oracle_degenerate);
    const auto got = local_supervised_level_loss(cols_of<float>(f), as_bytes(cls), cfg_with(0.07));
    CHECK(got.degenerate == oracle_degenerate);
    CHECK(std::isfinite(got.value));
    worst = std::max(worst, std::abs(static_cast<double>(got.value) - want));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("local loss on a feature grid uses the mask at the grid anchors") {
  std::mt19937_64 rng(17);
  LocalFeatureMap<double> f{cols_of<double>(support::random_vectors(rng, 36, 4, true)), 6, 6};
  LabelGrid mask(24, 24);
  std::vector<int> cls(36);
  for (Index y = 0; y < 24; ++y)
    for (Index x = 0; x < 24; ++x) mask(y, x) = static_cast<std::uint8_t>((y / 8 + x / 12) % 3);
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) cls[static_cast<std::size_t>(y * 6 + x)] = mask(y * 4, x * 4);
  std::vector<oracle::Vec> cols(36, oracle::Vec(4));
  for (Index p = 0; p < 36; ++p)
    for (Index d = 0; d < 4; ++d) cols[static_cast<std::size_t>(p)][static_cast<std::size_t>(d)] = f.features(d, p);
  CHECK(local_supervised_level_loss(f, mask, cfg_with(0.2)).value == doctest::Approx(oracle::local_loss(cols, cls, 0.2)).epsilon(1e-10));
  LabelGrid odd(25, 24);
  CHECK_THROWS_AS(local_supervised_level_loss(f, odd, cfg_with(0.2)), Error);
}

TEST_CASE("per-class cap keeps order and bounds every class") {
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 300; ++i) labels.push_back(static_cast<std::uint8_t>(i % 3 == 0 ? 0 : 1));
  const auto keep = cap_points_per_class(labels, 50, 4);
  CHECK(std::is_sorted(keep.begin(), keep.end()));
  std::array<int, 2> count{};
  for (auto k : keep) ++count[labels[static_cast<std::size_t>(k)]];
  CHECK(count[0] == 50);
  CHECK(count[1] == 50);
  CHECK(cap_points_per_class(labels, 50, 4) == keep);
  CHECK(cap_points_per_class(labels, 50, 5) != keep);
  CHECK(cap_points_per_class(labels, 1000, 4).size() == 300);
}

TEST_CASE("local batch loss is the mean of single-sample losses") {
  std::mt19937_64 rng(19);
  auto sample = [&] {
    return LocalFeatureMap<double>{cols_of<double>(support::random_vectors(rng, 16, 4, true)), 4, 4};
  };
  LabelGrid ma(4, 4), mb(4, 4);
  for (Index i = 0; i < 16; ++i) {
    ma.data()[i] = static_cast<std::uint8_t>(i % 2);
    mb.data()[i] = static_cast<std::uint8_t>(i / 6);
  }
  const auto a = sample(), b = sample();
  const auto cfg = cfg_with(0.3);
  const double la = local_supervised_level_loss(a, ma, cfg).value, lb = local_supervised_level_loss(b, mb, cfg).value;
  CHECK(local_supervised_batch_loss<double>({a, b}, {&ma, &mb}, cfg) == doctest::Approx((la + lb) / 2).epsilon(1e-12));
  CHECK(local_supervised_batch_loss<double>({b, a}, {&mb, &ma}, cfg) == doctest::Approx((la + lb) / 2).epsilon(1e-12));
  CHECK(local_supervised_batch_loss<double>({a, a, a}, {&ma, &ma, &ma}, cfg) == doctest::Approx(la).epsilon(1e-12));
  CHECK_THROWS_AS(local_supervised_batch_loss<double>({a, b}, {&ma, nullptr}, cfg), Error);
  CHECK_THROWS_AS(local_supervised_batch_loss<double>({a, b}, {&ma}, cfg), Error);

  LabelGrid flat = LabelGrid::Constant(4, 4, 2);
  int degenerate = 0;
  local_supervised_batch_loss<double>({a, b}, {&flat, &mb}, cfg, 0, nullptr, &degenerate);
  CHECK(degenerate == 1);
}

TEST_CASE("local loss gradient matches finite differences") {
  std::mt19937_64 rng(23);
  const Grid<double> f = cols_of<double>(support::random_vectors(rng, 12, 5, true));
  const auto cls = as_bytes(support::random_labels(rng, 12, 3));
  const auto cfg = cfg_with(0.5);
  Grid<double> analytic;
  local_supervised_level_loss(f, cls, cfg, 0, &analytic);
  const auto numeric = numeric_grad(f, [&](const Grid<double>& x) { return local_supervised_level_loss(x, cls, cfg).value; });
  CHECK(rel_err(analytic, numeric) < 1e-2);
}

TEST_CASE("dice loss closed forms") {
  // Two channels, uniform softmax (p = 0.5 everywhere), foreground on the first two pixels.
  const auto toy = logits_of<double>({{0, 0, 0, 0}, {0, 0, 0, 0}}, 2, 2);
  CHECK(dice_loss(toy, mask_of({1, 1, 0, 0}, 2, 2)) == doctest::Approx(0.5).epsilon(1e-5));

  std::mt19937_64 rng(29);
  auto truth = support::random_labels(rng, 64, kNumClasses);
  std::vector<oracle::Vec> sat(kNumClasses, oracle::Vec(64, -40.0));
  for (std::size_t p = 0; p < 64; ++p) sat[static_cast<std::size_t>(truth[p])][p] = 40.0;
  CHECK(dice_loss(logits_of<double>(sat, 8, 8), mask_of(truth, 8, 8)) < 1e-3);

  // Predict class c+1 wherever the truth is c: every class overlaps nothing.
  std::vector<oracle::Vec> off(kNumClasses, oracle::Vec(64, -40.0));
  for (std::size_t p = 0; p < 64; ++p) off[static_cast<std::size_t>((truth[p] + 1) % kNumClasses)][p] = 40.0;
  CHECK(dice_loss(logits_of<double>(off, 8, 8), mask_of(truth, 8, 8)) > 1 - 1e-3);

  // All background and predicted background: nothing enters the mean.
  std::vector<oracle::Vec> bg(kNumClasses, oracle::Vec(4, 0.0));
  bg[0].assign(4, 5.0);
  CHECK(dice_loss(logits_of<double>(bg, 2, 2), mask_of({0, 0, 0, 0}, 2, 2)) == 0.0);

  CHECK_THROWS_AS(dice_loss(toy, mask_of({0, 0, 0, 0, 0, 0}, 2, 3)), Error);
  CHECK_THROWS_AS(dice_loss(toy, mask_of({0, 5, 0, 0}, 2, 2)), Error);
}

TEST_CASE("dice loss matches the per-pixel oracle on random float32 logits") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0.0, 2.0);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<oracle::Vec> logits(kNumClasses, oracle::Vec(64));
    for (auto& row : logits)
      for (auto& v : row) v = g(rng);
    logits = support::rounded<float>(logits);
    const auto mask = support::random_labels(rng, 64, trial % 4 == 0 ? 3 : kNumClasses);
    const float got = dice_loss(logits_of<float>(logits, 8, 8), mask_of(mask, 8, 8));
    const double want = oracle::dice_loss(logits, mask);
    worst = std::max(worst, std::abs(static_cast<double>(got) - want));
    CHECK(got >= 0.0f);
    CHECK(got <= 1.0f);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("raising the true-class logit never raises the dice loss") {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<oracle::Vec> logits(4, oracle::Vec(16));
    for (auto& row : logits)
      for (auto& v : row) v = g(rng);
    const auto mask = support::random_labels(rng, 16, 4);
    // Keep the argmax fixed so the set of averaged classes cannot change.
    for (std::size_t p = 0; p < 16; ++p) logits[static_cast<std::size_t>(mask[p])][p] += 6.0;
    double prev = dice_loss(logits_of<double>(logits, 4, 4), mask_of(mask, 4, 4));
    for (int step = 0; step < 10; ++step) {
      const auto p = static_cast<std::size_t>(step % 16);
      logits[static_cast<std::size_t>(mask[p])][p] += 0.5;
      const double now = dice_loss(logits_of<double>(logits, 4, 4), mask_of(mask, 4, 4));
      CHECK(now <= prev + 1e-12);
      prev = now;
    }
  }
}

TEST_CASE("dice loss gradient matches finite differences") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> g(0.0, 1.0);
  Grid<double> z(kNumClasses, 64);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);
  const LabelGrid mask = mask_of(support::random_labels(rng, 64, 5), 8, 8);
  FeatureMap<double> analytic;
  dice_loss(FeatureMap<double>(z, 8, 8), mask, &analytic);
  // Finite steps may flip an argmax and change the averaged class set; all 5 mask classes are present regardless.
  const auto numeric = numeric_grad(z, [&](const Grid<double>& x) { return dice_loss(FeatureMap<double>(x, 8, 8), mask); });
  CHECK(rel_err(analytic.data, numeric) < 1e-2);
}

TEST_CASE("deep supervision weighs per-level dice") {
  std::mt19937_64 rng(43);
  std::normal_distribution<double> g(0.0, 1.0);
  SegLogits<double> logits;
  for (auto& l : logits) {
    l = FeatureMap<double>(kNumClasses, 4, 4);
    for (Index i = 0; i < l.data.size(); ++i) l.data.data()[i] = g(rng);
  }
  const LabelGrid mask = mask_of(support::random_labels(rng, 16, kNumClasses), 4, 4);
  std::array<double, kHeadCount> each{};
  const auto w = parse_portfolio("2:3:5");
  const double total = deep_supervised_loss<double>(logits, mask, w, nullptr, &each);
  double loop = 0;
  for (int h = 0; h < kHeadCount; ++h) {
    CHECK(each[static_cast<std::size_t>(h)] == doctest::Approx(dice_loss(logits[static_cast<std::size_t>(h)], mask)));
    loop += w[static_cast<std::size_t>(h)] * each[static_cast<std::size_t>(h)];
  }
  CHECK(total == doctest::Approx(loop));

  // Same logits on every level: the portfolio does not matter.
  SegLogits<double> same{logits[0], logits[0], logits[0]};
  const double one = dice_loss(logits[0], mask);
  CHECK(deep_supervised_loss(same, mask, w) == doctest::Approx(one));
  CHECK(deep_supervised_loss(same, mask, kDefaultLevelWeights) == doctest::Approx(one));

  const std::array<double, 3> levels{0.3, 0.2, 0.1};
  CHECK(multiscale_sum<double>(levels, w) == doctest::Approx(0.17));

  const std::array<double, 2> two{0.5, 0.5};
  CHECK_THROWS_AS(deep_supervised_loss(logits, mask, two), Error);

  SegLogits<double> grads;
  deep_supervised_loss(logits, mask, w, &grads);
  for (int h = 0; h < kHeadCount; ++h) {
    FeatureMap<double> single;
    dice_loss(logits[static_cast<std::size_t>(h)], mask, &single);
    CHECK((grads[static_cast<std::size_t>(h)].data - w[static_cast<std::size_t>(h)] * single.data).norm() < 1e-12);
  }
}
