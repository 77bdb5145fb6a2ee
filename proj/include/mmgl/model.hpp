#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmgl/nn/layers.hpp"
#include "mmgl/resample.hpp"

namespace mmgl {

struct ModelConfig {
  int in_channels = 1;
  int base_channels = 16;
  int n_classes = kNumClasses;
  int embed_dim = 128;
  int head_hidden = 256;
  int local_dim = 64;
  int local_stride = 4;
  Index input_size = kSliceSize;
  /// Rectifier between the two layers of every projection head.
  bool head_nonlinearity = true;
  /// Initial bias of the background logit in every segmentation head; 0 starts from uniform class odds.
  double seg_background_bias = 0.0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr int kEncoderLevels = 4;
inline constexpr int kDecoderLevels = 4;
inline constexpr int kHeadCount = 3;
/// Encoder levels carrying global heads and decoder levels carrying local and
/// deep-supervision heads. Head h sits on level kHeadLevels[h]; the last entry is
/// the deepest encoder block and the finest decoder block.
inline constexpr std::array<int, kHeadCount> kHeadLevels{2, 3, 4};

inline int head_index(int level) {
  require(level >= kHeadLevels.front() && level <= kHeadLevels.back(), ErrorKind::invalid_input,
          "level " + std::to_string(level) + " carries no head");
  return level - kHeadLevels.front();
}

inline void ModelConfig::validate() const {
  require(in_channels == 1, ErrorKind::invalid_config, "in_channels must be 1");
  require(base_channels >= 1 && n_classes >= 2 && embed_dim >= 1 && head_hidden >= 1 && local_dim >= 1,
          ErrorKind::invalid_config, "model widths must be positive");
  require(std::isfinite(seg_background_bias), ErrorKind::invalid_config, "seg_background_bias must be finite");
  require(local_stride >= 1, ErrorKind::invalid_config, "local_stride must be positive");
  require(input_size % 16 == 0 && input_size >= 16, ErrorKind::invalid_config, "input_size must be a multiple of 16");
  // The coarsest local head sees input_size/4 and is subsampled by local_stride.
  require((input_size / 4) % local_stride == 0, ErrorKind::invalid_config, "local_stride must divide every head level");
}

/// Spatial size of encoder output e (after pooling) and decoder output d.
inline Index encoder_size(const ModelConfig& c, int e) { return c.input_size >> e; }
inline Index decoder_size(const ModelConfig& c, int d) { return c.input_size >> (kDecoderLevels - d); }
inline Index encoder_channels(const ModelConfig& c, int e) { return Index{c.base_channels} << (e - 1); }
inline Index decoder_channels(const ModelConfig& c, int d) { return encoder_channels(c, kEncoderLevels + 1 - d); }

template <typename Scalar>
using SegLogits = std::array<FeatureMap<Scalar>, kHeadCount>;

/// Intermediate activations kept for the backward pass. Arrays are indexed by level-1.
template <typename Scalar>
struct UNetTrace {
  FeatureMap<Scalar> input;
  std::array<FeatureMap<Scalar>, kEncoderLevels> enc_a;
  std::array<FeatureMap<Scalar>, kEncoderLevels> enc_skip;
  std::array<std::vector<std::int32_t>, kEncoderLevels> pool_arg;
  std::array<FeatureMap<Scalar>, kEncoderLevels> enc_out;
  FeatureMap<Scalar> bottleneck;
  std::array<FeatureMap<Scalar>, kDecoderLevels> dec_cat;
  std::array<FeatureMap<Scalar>, kDecoderLevels> dec_out;
  bool decoded = false;

  const FeatureMap<Scalar>& encoder(int e) const { return enc_out[static_cast<std::size_t>(e - 1)]; }
  const FeatureMap<Scalar>& decoder(int d) const { return dec_out[static_cast<std::size_t>(d - 1)]; }
};

/// Upstream gradients w.r.t. encoder outputs and decoder outputs; empty maps mean zero.
template <typename Scalar>
struct UNetGrads {
  std::array<FeatureMap<Scalar>, kEncoderLevels> enc_out;
  std::array<FeatureMap<Scalar>, kDecoderLevels> dec_out;

  void add_encoder(int e, const FeatureMap<Scalar>& g) { accumulate(enc_out[static_cast<std::size_t>(e - 1)], g); }
  void add_decoder(int d, const FeatureMap<Scalar>& g) { accumulate(dec_out[static_cast<std::size_t>(d - 1)], g); }

  static void accumulate(FeatureMap<Scalar>& dst, const FeatureMap<Scalar>& g) {
    if (dst.channels() == 0) dst = g;
    else dst.data += g.data;
  }
};

template <typename Scalar>
struct GlobalHeadCache {
  Vector<Scalar> pooled, hidden, raw, embedding;
  Index height = 0, width = 0;
};

/// Stride-subsampled, per-location unit-norm features; `features` is local_dim x points.
template <typename Scalar>
struct LocalFeatureMap {
  Grid<Scalar> features;
  Index height = 0, width = 0;
};

template <typename Scalar>
struct LocalHeadCache {
  FeatureMap<Scalar> sampled, hidden;
  Grid<Scalar> raw;
  Index source_height = 0, source_width = 0;
};

template <typename Scalar>
struct EncoderBlock {
  nn::Conv2d<Scalar> conv_a, conv_b;
};

template <typename Scalar>
struct ProjectionHead {
  nn::Linear<Scalar> fc1, fc2;
};

template <typename Scalar>
struct LocalHead {
  nn::Conv2d<Scalar> conv1, conv2;
};

/// U-Net with four encoder and four decoder blocks, global projection heads on
/// encoder levels 2..4, local projection heads and deep-supervision heads on
/// decoder levels 2..4. Parameter pointers handed out by the *_params()
/// accessors stay valid as long as the model is not moved.
template <typename Scalar>
class UNet {
 public:
  explicit UNet(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x0de1));
    Index in = cfg_.in_channels;
    for (int e = 1; e <= kEncoderLevels; ++e) {
      const Index c = encoder_channels(cfg_, e);
      auto& b = enc_[static_cast<std::size_t>(e - 1)];
      b.conv_a = nn::Conv2d<Scalar>(in, c, 3);
      b.conv_b = nn::Conv2d<Scalar>(c, c, 3);
      b.conv_a.init(rng);
      b.conv_b.init(rng);
      in = c;
    }
    bottleneck_ = nn::Conv2d<Scalar>(in, in, 3);
    bottleneck_.init(rng);
    Index below = in;
    for (int d = 1; d <= kDecoderLevels; ++d) {
      const Index skip = encoder_channels(cfg_, kEncoderLevels + 1 - d);
      const Index c = decoder_channels(cfg_, d);
      auto& conv = dec_[static_cast<std::size_t>(d - 1)];
      conv = nn::Conv2d<Scalar>(below + skip, c, 3);
      conv.init(rng);
      below = c;
    }
    for (int h = 0; h < kHeadCount; ++h) {
      const int level = kHeadLevels[static_cast<std::size_t>(h)];
      auto& g = global_[static_cast<std::size_t>(h)];
      g.fc1 = nn::Linear<Scalar>(encoder_channels(cfg_, level), cfg_.head_hidden);
      g.fc2 = nn::Linear<Scalar>(cfg_.head_hidden, cfg_.embed_dim);
      g.fc1.init(rng);
      g.fc2.init(rng);
      auto& l = local_[static_cast<std::size_t>(h)];
      l.conv1 = nn::Conv2d<Scalar>(decoder_channels(cfg_, level), cfg_.head_hidden, 1);
      l.conv2 = nn::Conv2d<Scalar>(cfg_.head_hidden, cfg_.local_dim, 1);
      l.conv1.init(rng);
      l.conv2.init(rng);
      auto& s = seg_[static_cast<std::size_t>(h)];
      s = nn::Conv2d<Scalar>(decoder_channels(cfg_, level), cfg_.n_classes, 1);
      s.init(rng);
      s.bias.value(0, 0) = static_cast<Scalar>(cfg_.seg_background_bias);
    }
  }

  UNet(const UNet&) = default;
  UNet& operator=(const UNet&) = default;

  const ModelConfig& config() const { return cfg_; }

  // ---- forward -------------------------------------------------------------

  UNetTrace<Scalar> encode(const Grid<Scalar>& img) const {
    require(img.rows() == cfg_.input_size && img.cols() == cfg_.input_size, ErrorKind::invalid_input,
            "expected " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) + " input, got " +
                std::to_string(img.rows()) + "x" + std::to_string(img.cols()));
    UNetTrace<Scalar> t;
    t.input = FeatureMap<Scalar>::from_image(img);
    for (int e = 1; e <= kEncoderLevels; ++e) {
      const auto i = static_cast<std::size_t>(e - 1);
      const FeatureMap<Scalar>& x = e == 1 ? t.input : t.enc_out[i - 1];
      t.enc_a[i] = enc_[i].conv_a.forward(x);
      nn::relu_inplace(t.enc_a[i].data);
      t.enc_skip[i] = enc_[i].conv_b.forward(t.enc_a[i]);
      nn::relu_inplace(t.enc_skip[i].data);
      t.enc_out[i] = nn::max_pool2(t.enc_skip[i], t.pool_arg[i]);
    }
    return t;
  }

  /// Runs the decoder on an encoded trace, up to and including decoder level `last`.
  void decode(UNetTrace<Scalar>& t, int last = kDecoderLevels) const {
    t.bottleneck = bottleneck_.forward(t.enc_out.back());
    nn::relu_inplace(t.bottleneck.data);
    for (int d = 1; d <= last; ++d) {
      const auto i = static_cast<std::size_t>(d - 1);
      const FeatureMap<Scalar>& below = d == 1 ? t.bottleneck : t.dec_out[i - 1];
      t.dec_cat[i] = nn::concat_channels(nn::upsample_nearest2(below), t.enc_skip[static_cast<std::size_t>(kEncoderLevels - d)]);
      t.dec_out[i] = dec_[i].forward(t.dec_cat[i]);
      nn::relu_inplace(t.dec_out[i].data);
    }
    t.decoded = true;
  }

  UNetTrace<Scalar> forward(const Grid<Scalar>& img) const {
    auto t = encode(img);
    decode(t);
    return t;
  }

  Vector<Scalar> global_project(int level, const FeatureMap<Scalar>& feature, GlobalHeadCache<Scalar>* cache = nullptr) const {
    const auto& head = global_[static_cast<std::size_t>(head_index(level))];
    require(feature.channels() == head.fc1.in_features, ErrorKind::shape_mismatch, "global head input channels");
    GlobalHeadCache<Scalar> local;
    GlobalHeadCache<Scalar>& c = cache ? *cache : local;
    c.height = feature.height;
    c.width = feature.width;
    c.pooled = nn::global_avg_pool(feature);
    c.hidden = head.fc1.forward(c.pooled);
    if (cfg_.head_nonlinearity) nn::relu_inplace(c.hidden);
    c.raw = head.fc2.forward(c.hidden);
    c.embedding = nn::l2_normalize(c.raw);
    return c.embedding;
  }

  LocalFeatureMap<Scalar> local_project(int level, const FeatureMap<Scalar>& feature, LocalHeadCache<Scalar>* cache = nullptr) const {
    const auto& head = local_[static_cast<std::size_t>(head_index(level))];
    require(feature.channels() == head.conv1.in_channels, ErrorKind::shape_mismatch, "local head input channels");
    const Index s = cfg_.local_stride;
    require(feature.height % s == 0 && feature.width % s == 0, ErrorKind::shape_mismatch, "stride must divide the feature map");
    LocalHeadCache<Scalar> local;
    LocalHeadCache<Scalar>& c = cache ? *cache : local;
    c.source_height = feature.height;
    c.source_width = feature.width;
    // The head is pointwise, so subsampling first is exact and cheaper.
    c.sampled = FeatureMap<Scalar>(feature.channels(), feature.height / s, feature.width / s);
    for (Index y = 0; y < c.sampled.height; ++y)
      for (Index x = 0; x < c.sampled.width; ++x)
        c.sampled.data.col(y * c.sampled.width + x) = feature.data.col((y * s) * feature.width + x * s);
    c.hidden = head.conv1.forward(c.sampled);
    if (cfg_.head_nonlinearity) nn::relu_inplace(c.hidden.data);
    c.raw = head.conv2.forward(c.hidden).data;
    return {nn::l2_normalize_columns(c.raw), c.sampled.height, c.sampled.width};
  }

  /// Class logits of the deep-supervision head on decoder `level`, resized to the input size.
  FeatureMap<Scalar> segment(int level, const FeatureMap<Scalar>& feature) const {
    const auto& head = seg_[static_cast<std::size_t>(head_index(level))];
    return resize_bilinear(head.forward(feature), cfg_.input_size, cfg_.input_size);
  }

  SegLogits<Scalar> forward_segmentation(const Grid<Scalar>& img) const {
    const auto t = forward(img);
    return segmentation_logits(t);
  }

  SegLogits<Scalar> segmentation_logits(const UNetTrace<Scalar>& t) const {
    SegLogits<Scalar> out;
    for (int h = 0; h < kHeadCount; ++h) {
      const int level = kHeadLevels[static_cast<std::size_t>(h)];
      out[static_cast<std::size_t>(h)] = segment(level, t.decoder(level));
    }
    return out;
  }

  /// Argmax of the final (finest) deep-supervision head.
  LabelGrid predict(const Grid<Scalar>& img) const {
    const auto t = forward(img);
    const FeatureMap<Scalar> logits = segment(kHeadLevels.back(), t.decoder(kHeadLevels.back()));
    LabelGrid mask(logits.height, logits.width);
    for (Index p = 0; p < logits.pixels(); ++p) {
      Index best = 0;
      logits.data.col(p).maxCoeff(&best);
      mask.data()[p] = static_cast<std::uint8_t>(best);
    }
    return mask;
  }

  // ---- backward ------------------------------------------------------------

  FeatureMap<Scalar> global_project_backward(int level, const GlobalHeadCache<Scalar>& c, const Vector<Scalar>& d_embedding) {
    auto& head = global_[static_cast<std::size_t>(head_index(level))];
    Vector<Scalar> g = nn::l2_normalize_backward(c.raw, c.embedding, d_embedding);
    g = head.fc2.backward(c.hidden, g);
    if (cfg_.head_nonlinearity) g = nn::relu_backward(c.hidden, g);
    g = head.fc1.backward(c.pooled, g);
    return nn::global_avg_pool_backward(g, c.height, c.width);
  }

  FeatureMap<Scalar> local_project_backward(int level, const LocalHeadCache<Scalar>& c, const Grid<Scalar>& d_features) {
    auto& head = local_[static_cast<std::size_t>(head_index(level))];
    const Grid<Scalar> normalized = nn::l2_normalize_columns(c.raw);
    FeatureMap<Scalar> g(nn::l2_normalize_columns_backward(c.raw, normalized, d_features), c.hidden.height, c.hidden.width);
    g = head.conv2.backward(c.hidden, g);
    if (cfg_.head_nonlinearity) g.data = nn::relu_backward(c.hidden.data, g.data);
    g = head.conv1.backward(c.sampled, g);
    const Index s = cfg_.local_stride;
    FeatureMap<Scalar> out(g.channels(), c.source_height, c.source_width);
    for (Index y = 0; y < g.height; ++y)
      for (Index x = 0; x < g.width; ++x) out.data.col((y * s) * out.width + x * s) = g.data.col(y * g.width + x);
    return out;
  }

  FeatureMap<Scalar> segment_backward(int level, const FeatureMap<Scalar>& feature, const FeatureMap<Scalar>& d_logits) {
    auto& head = seg_[static_cast<std::size_t>(head_index(level))];
    const auto g = resize_bilinear_backward(d_logits, feature.height, feature.width);
    return head.backward(feature, g);
  }

  /// Backpropagates through decoder and encoder, accumulating parameter gradients.
  /// With `train_encoder` false the pass stops at the encoder boundary.
  void backward(const UNetTrace<Scalar>& t, UNetGrads<Scalar> grads, bool train_encoder = true) {
    std::array<FeatureMap<Scalar>, kEncoderLevels> d_skip;
    const bool any_decoder = std::any_of(grads.dec_out.begin(), grads.dec_out.end(), [](const auto& g) { return g.channels() > 0; });
    if (any_decoder) {
      require(t.decoded, ErrorKind::invalid_input, "decoder gradients on an encoder-only trace");
      int deepest = 0;
      for (int d = kDecoderLevels; d >= 1; --d)
        if (grads.dec_out[static_cast<std::size_t>(d - 1)].channels() > 0) { deepest = d; break; }
      FeatureMap<Scalar> carry;
      for (int d = deepest; d >= 1; --d) {
        const auto i = static_cast<std::size_t>(d - 1);
        FeatureMap<Scalar> g = grads.dec_out[i];
        if (carry.channels() > 0) UNetGrads<Scalar>::accumulate(g, carry);
        if (g.channels() == 0) continue;
        g.data = nn::relu_backward(t.dec_out[i].data, g.data);
        FeatureMap<Scalar> d_cat = dec_[i].backward(t.dec_cat[i], g);
        const FeatureMap<Scalar>& below = d == 1 ? t.bottleneck : t.dec_out[i - 1];
        const Index below_c = below.channels();
        FeatureMap<Scalar> d_up(d_cat.data.topRows(below_c), d_cat.height, d_cat.width);
        const auto skip_i = static_cast<std::size_t>(kEncoderLevels - d);
        d_skip[skip_i] = FeatureMap<Scalar>(d_cat.data.bottomRows(d_cat.channels() - below_c), d_cat.height, d_cat.width);
        carry = nn::upsample_nearest2_backward(d_up);
      }
      // carry now holds d(bottleneck output)
      FeatureMap<Scalar> g = carry;
      g.data = nn::relu_backward(t.bottleneck.data, g.data);
      UNetGrads<Scalar>::accumulate(grads.enc_out.back(), bottleneck_.backward(t.enc_out.back(), g, train_encoder));
    }
    if (!train_encoder) return;

    FeatureMap<Scalar> carry;
    for (int e = kEncoderLevels; e >= 1; --e) {
      const auto i = static_cast<std::size_t>(e - 1);
      FeatureMap<Scalar> g_out = grads.enc_out[i];
      if (carry.channels() > 0) UNetGrads<Scalar>::accumulate(g_out, carry);
      FeatureMap<Scalar> g_skip;
      if (g_out.channels() > 0) g_skip = nn::max_pool2_backward(g_out, t.pool_arg[i], t.enc_skip[i].height, t.enc_skip[i].width);
      if (d_skip[i].channels() > 0) UNetGrads<Scalar>::accumulate(g_skip, d_skip[i]);
      if (g_skip.channels() == 0) {
        carry = {};
        continue;
      }
      g_skip.data = nn::relu_backward(t.enc_skip[i].data, g_skip.data);
      FeatureMap<Scalar> g_a = enc_[i].conv_b.backward(t.enc_a[i], g_skip);
      g_a.data = nn::relu_backward(t.enc_a[i].data, g_a.data);
      const FeatureMap<Scalar>& x = e == 1 ? t.input : t.enc_out[i - 1];
      carry = enc_[i].conv_a.backward(x, g_a, e > 1);
    }
  }

  // ---- parameters ----------------------------------------------------------

  nn::ParamList<Scalar> encoder_params() {
    nn::ParamList<Scalar> out;
    for (int e = 1; e <= kEncoderLevels; ++e) {
      auto& b = enc_[static_cast<std::size_t>(e - 1)];
      const std::string p = "encoder." + std::to_string(e);
      b.conv_a.collect(p + ".conv_a", out);
      b.conv_b.collect(p + ".conv_b", out);
    }
    return out;
  }

  /// Bottleneck plus decoder blocks.
  nn::ParamList<Scalar> decoder_params() {
    nn::ParamList<Scalar> out;
    bottleneck_.collect("bottleneck.conv", out);
    for (int d = 1; d <= kDecoderLevels; ++d) dec_[static_cast<std::size_t>(d - 1)].collect("decoder." + std::to_string(d) + ".conv", out);
    return out;
  }

  nn::ParamList<Scalar> global_head_params() {
    nn::ParamList<Scalar> out;
    for (int h = 0; h < kHeadCount; ++h) {
      const std::string p = "global_head." + std::to_string(kHeadLevels[static_cast<std::size_t>(h)]);
      global_[static_cast<std::size_t>(h)].fc1.collect(p + ".fc1", out);
      global_[static_cast<std::size_t>(h)].fc2.collect(p + ".fc2", out);
    }
    return out;
  }

  nn::ParamList<Scalar> local_head_params() {
    nn::ParamList<Scalar> out;
    for (int h = 0; h < kHeadCount; ++h) {
      const std::string p = "local_head." + std::to_string(kHeadLevels[static_cast<std::size_t>(h)]);
      local_[static_cast<std::size_t>(h)].conv1.collect(p + ".conv1", out);
      local_[static_cast<std::size_t>(h)].conv2.collect(p + ".conv2", out);
    }
    return out;
  }

  nn::ParamList<Scalar> seg_head_params() {
    nn::ParamList<Scalar> out;
    for (int h = 0; h < kHeadCount; ++h)
      seg_[static_cast<std::size_t>(h)].collect("seg_head." + std::to_string(kHeadLevels[static_cast<std::size_t>(h)]) + ".conv", out);
    return out;
  }

  nn::ParamList<Scalar> all_params() {
    nn::ParamList<Scalar> out;
    using Getter = nn::ParamList<Scalar> (UNet::*)();
    for (Getter list : {&UNet::encoder_params, &UNet::decoder_params, &UNet::global_head_params, &UNet::local_head_params,
                        &UNet::seg_head_params}) {
      auto part = (this->*list)();
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : all_params()) p.param->zero_grad();
  }

 private:
  ModelConfig cfg_;
  std::array<EncoderBlock<Scalar>, kEncoderLevels> enc_;
  nn::Conv2d<Scalar> bottleneck_;
  std::array<nn::Conv2d<Scalar>, kDecoderLevels> dec_;
  std::array<ProjectionHead<Scalar>, kHeadCount> global_;
  std::array<LocalHead<Scalar>, kHeadCount> local_;
  std::array<nn::Conv2d<Scalar>, kHeadCount> seg_;
};

using Model = UNet<float>;

}  // namespace mmgl
