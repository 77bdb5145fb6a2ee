#include <doctest.h>

#include "mmgl/losses.hpp"
#include "mmgl/model.hpp"

using namespace mmgl;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.base_channels = 2;
  c.head_hidden = 5;
  c.embed_dim = 3;
  c.local_dim = 3;
  c.local_stride = 2;
  c.input_size = 16;
  return c;
}

Grid<double> random_image(std::uint64_t seed, Index n) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Grid<double> g(n, n);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = u(rng);
  return g;
}

LabelGrid random_mask(std::uint64_t seed, Index n, int classes) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, classes - 1);
  LabelGrid g(n, n);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = static_cast<std::uint8_t>(u(rng));
  return g;
}

// Zero biases plus dead rectifiers leave exactly-zero feature columns, where
// normalisation is singular; a small jitter keeps the check away from them.
void jitter(UNet<double>& m, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& p : m.all_params())
    for (Index i = 0; i < p.param->value.size(); ++i) p.param->value.data()[i] += n(rng);
}

// Central differences on a handful of coordinates of every parameter tensor.
template <typename Loss>
void check_params(UNet<double>& m, nn::ParamList<double> params, Loss loss, double tol = 1e-2) {
  m.zero_grad();
  loss(true);
  Rng rng(7);
  for (auto& p : params) {
    const Grid<double> analytic = p.param->grad;
    for (int k = 0; k < 3; ++k) {
      const Index i = std::uniform_int_distribution<Index>(0, p.param->value.size() - 1)(rng);
      double& w = p.param->value.data()[i];
      const double saved = w, h = 1e-5;
      w = saved + h;
      const double up = loss(false);
      w = saved - h;
      const double down = loss(false);
      w = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      INFO(p.name << "[" << i << "] analytic " << a << " numeric " << numeric);
      CHECK(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("deep supervision gradient reaches every trainable tensor") {
  UNet<double> m(tiny(), 3);
  jitter(m, 1);
  const auto img = random_image(1, 16);
  const auto mask = random_mask(2, 16, kNumClasses);
  const WeightTriple w{0.2, 0.3, 0.5};
  auto loss = [&](bool backprop) {
    const auto t = m.forward(img);
    const auto logits = m.segmentation_logits(t);
    SegLogits<double> g;
    const double v = deep_supervised_loss<double>(logits, mask, w, backprop ? &g : nullptr);
    if (backprop) {
      UNetGrads<double> grads;
      for (int h = 0; h < kHeadCount; ++h) grads.add_decoder(kHeadLevels[h], m.segment_backward(kHeadLevels[h], t.decoder(kHeadLevels[h]), g[h]));
      m.backward(t, grads, true);
    }
    return v;
  };
  auto params = m.encoder_params();
  for (auto& p : m.decoder_params()) params.push_back(p);
  for (auto& p : m.seg_head_params()) params.push_back(p);
  check_params(m, params, loss);
}

TEST_CASE("global contrastive gradient through encoder and heads") {
  UNet<double> m(tiny(), 5);
  jitter(m, 2);
  std::vector<Grid<double>> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(10 + i, 16));
  const std::vector<int> partner{1, 0, 3, 2};
  ContrastiveConfig cc;
  cc.temperature = 0.5;
  auto loss = [&](bool backprop) {
    std::vector<UNetTrace<double>> traces;
    std::vector<std::array<GlobalHeadCache<double>, kHeadCount>> caches(4);
    std::array<Grid<double>, kHeadCount> emb;
    for (auto& e : emb) e.resize(4, 3);
    for (int i = 0; i < 4; ++i) {
      traces.push_back(m.encode(imgs[i]));
      for (int h = 0; h < kHeadCount; ++h) emb[h].row(i) = m.global_project(kHeadLevels[h], traces[i].encoder(kHeadLevels[h]), &caches[i][h]).transpose();
    }
    double total = 0;
    std::array<Grid<double>, kHeadCount> g;
    for (int h = 0; h < kHeadCount; ++h) total += kDefaultLevelWeights[h] * global_contrastive_level_loss<double>(emb[h], partner, cc, &g[h]);
    if (backprop)
      for (int i = 0; i < 4; ++i) {
        UNetGrads<double> grads;
        for (int h = 0; h < kHeadCount; ++h) {
          const Vector<double> d = kDefaultLevelWeights[h] * g[h].row(i).transpose();
          grads.add_encoder(kHeadLevels[h], m.global_project_backward(kHeadLevels[h], caches[i][h], d));
        }
        m.backward(traces[i], grads, true);
      }
    return total;
  };
  auto params = m.encoder_params();
  for (auto& p : m.global_head_params()) params.push_back(p);
  check_params(m, params, loss);
}

TEST_CASE("local contrastive gradient through decoder and heads") {
  UNet<double> m(tiny(), 9);
  jitter(m, 3);
  const auto img = random_image(3, 16);
  const auto mask = random_mask(4, 16, 3);
  ContrastiveConfig cc;
  cc.temperature = 0.5;
  auto loss = [&](bool backprop) {
    const auto t = m.forward(img);
    UNetGrads<double> grads;
    double total = 0;
    for (int h = 0; h < kHeadCount; ++h) {
      LocalHeadCache<double> cache;
      const auto f = m.local_project(kHeadLevels[h], t.decoder(kHeadLevels[h]), &cache);
      Grid<double> g;
      total += kDefaultLevelWeights[h] * local_supervised_level_loss<double>(f, mask, cc, 0, &g).value;
      g *= kDefaultLevelWeights[h];
      if (backprop) grads.add_decoder(kHeadLevels[h], m.local_project_backward(kHeadLevels[h], cache, g));
    }
    if (backprop) m.backward(t, grads, true);
    return total;
  };
  auto params = m.encoder_params();
  for (auto& p : m.decoder_params()) params.push_back(p);
  for (auto& p : m.local_head_params()) params.push_back(p);
  check_params(m, params, loss);
}
