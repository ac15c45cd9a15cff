#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dadu/attention.hpp"
#include "dadu/layers.hpp"
#include "dadu/ops.hpp"

namespace dadu {

struct ModelConfig {
  int levels{4};
  int base_channels{16};
  int dense_layers{2};
  int growth_rate{0};  // 0 = half the level width
  int num_classes{4};
  int input_channels{1};
  bool use_attention{true};

  int level_width(int level) const { return base_channels << level; }
  int growth_at(int level) const { return growth_rate > 0 ? growth_rate : std::max(1, level_width(level) / 2); }
  int supervision_paths() const { return levels - 1; }

  void validate() const {
    if (levels < 2) throw ValueError(detail::cat("model: levels must be >= 2, got ", levels));
    if (base_channels < 1 || dense_layers < 1 || num_classes < 2 || input_channels < 1)
      throw ValueError("model: base_channels/dense_layers >= 1 and num_classes >= 2 required");
  }
};

// Sobel gradient magnitude of the channel-mean of an encoder feature map,
// g = sqrt(gx^2 + gy^2 + 1e-8), zero padding. The map is a fixed prior: it
// is not tape-tracked and no gradient flows through it.
template <typename T>
Tensor<T> edge_features(const Tensor<T>& f_enc) {
  const Shape4& s = f_enc.shape();
  Tensor<T> mean(Shape4{s.n, 1, s.h, s.w});
  auto fv = f_enc.val();
  auto mv = mean.val();
  const std::size_t hw = std::size_t(s.h) * s.w;
  for (int b = 0; b < s.n; ++b) {
    T* out = mv.data() + std::size_t(b) * hw;
    std::fill(out, out + hw, T(0));
    for (int c = 0; c < s.c; ++c) {
      const T* plane = fv.data() + (std::size_t(b) * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[i] += plane[i];
    }
    for (std::size_t i = 0; i < hw; ++i) out[i] /= T(s.c);
  }

  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Tensor<T> edges(Shape4{s.n, 1, s.h, s.w});
  auto ev = edges.val();
  for (int b = 0; b < s.n; ++b) {
    const T* in = mv.data() + std::size_t(b) * hw;
    T* out = ev.data() + std::size_t(b) * hw;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        T gx = T(0), gy = T(0);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int iy = y + dy, ix = x + dx;
            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
            const T v = in[std::size_t(iy) * s.w + ix];
            gx += T(kx[dy + 1][dx + 1]) * v;
            gy += T(ky[dy + 1][dx + 1]) * v;
          }
        out[std::size_t(y) * s.w + x] = std::sqrt(gx * gx + gy * gy + T(1e-8));
      }
  }
  return edges;
}

// One conv + batchnorm + relu unit.
template <typename T>
struct ConvBnRelu {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  static ConvBnRelu make(int out_c, int in_c, int k, int padding, std::mt19937_64& rng) {
    return ConvBnRelu{Conv2dLayer<T>::make(out_c, in_c, k, padding, rng), BatchNormLayer<T>::make(out_c)};
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, Tape<T>* tape) {
    return relu(bn(conv(x, tape), mode, tape), tape);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    conv.collect(prefix + ".conv", params);
    bn.collect(prefix + ".bn", params, buffers);
  }
};

// Dense block: each 3x3 layer consumes the concatenation of the block input
// and all previous layer outputs; a 1x1 transition compresses the stack to
// the level's nominal width.
template <typename T>
struct DenseBlock {
  std::vector<ConvBnRelu<T>> layers;
  Conv2dLayer<T> transition;
  int in_channels{0};
  int out_channels{0};
  int growth{0};

  static DenseBlock make(int in_c, int out_c, int num_layers, int growth, std::mt19937_64& rng) {
    DenseBlock block;
    block.in_channels = in_c;
    block.out_channels = out_c;
    block.growth = growth;
    for (int i = 0; i < num_layers; ++i)
      block.layers.push_back(ConvBnRelu<T>::make(growth, in_c + i * growth, 3, 1, rng));
    block.transition = Conv2dLayer<T>::make(out_c, in_c + num_layers * growth, 1, 0, rng);
    return block;
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, Tape<T>* tape) {
    if (x.shape().c != in_channels)
      throw ShapeError(detail::cat("dense block expects ", in_channels, " input channels, got ", x.shape().c));
    Tensor<T> stack = x;
    for (auto& layer : layers) {
      Tensor<T> out = layer(stack, mode, tape);
      stack = concat_channels<T>({stack, out}, tape);
    }
    return transition(stack, tape);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + ".layer" + std::to_string(i), params, buffers);
    transition.collect(prefix + ".transition", params);
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> main_probs;               // [n, K, H, W]
  std::vector<Tensor<T>> aux_probs;   // P entries, deepest decoder level first
  std::vector<AttentionMaps<T>> maps; // one per decoder level, deepest first
};

// DADU network: dense-block encoder, dual-attention + edge skip connections,
// decoder with auxiliary supervision heads, per-class sigmoid outputs.
template <typename T>
class DaduModel {
 public:
  DaduModel() = default;

  DaduModel(const ModelConfig& config, std::uint64_t seed) : cfg_(config) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int in_c = cfg_.input_channels;
    for (int i = 0; i < cfg_.levels; ++i) {
      const int width = cfg_.level_width(i);
      encoders_.push_back(DenseBlock<T>::make(in_c, width, cfg_.dense_layers, cfg_.growth_at(i), rng));
      in_c = width;
    }
    const int bottleneck_width = cfg_.level_width(cfg_.levels);
    bottleneck_ = DenseBlock<T>::make(in_c, bottleneck_width, cfg_.dense_layers,
                                      cfg_.growth_rate > 0 ? cfg_.growth_rate : bottleneck_width / 2, rng);
    // Decoder levels in execution order, deepest (levels-1) first.
    for (int i = cfg_.levels - 1; i >= 0; --i) {
      const int width = cfg_.level_width(i);
      DecoderLevel dec;
      dec.level = i;
      dec.up_conv = Conv2dLayer<T>::make(width, width * 2, 1, 0, rng);
      if (cfg_.use_attention) dec.dab = DabState<T>::make(width, rng);
      dec.fuse1 = ConvBnRelu<T>::make(width, 2 * width + 1, 3, 1, rng);
      dec.fuse2 = ConvBnRelu<T>::make(width, width, 3, 1, rng);
      decoders_.push_back(std::move(dec));
      if (i > 0) heads_.push_back(Conv2dLayer<T>::make(cfg_.num_classes, width, 1, 0, rng));
    }
    final_head_ = Conv2dLayer<T>::make(cfg_.num_classes, cfg_.level_width(0), 1, 0, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<T> forward(const Tensor<T>& image, Mode mode, Tape<T>* tape = nullptr) {
    const Shape4& s = image.shape();
    if (s.c != cfg_.input_channels)
      throw ShapeError(detail::cat("forward: expected ", cfg_.input_channels, "-channel input, got ", s.c));
    const int div = 1 << cfg_.levels;
    if (s.h % div != 0 || s.w % div != 0)
      throw ShapeError(detail::cat("forward: input ", s.h, "x", s.w, " must be divisible by ", div,
                                   "; pad to ", (s.h + div - 1) / div * div, "x", (s.w + div - 1) / div * div));

    std::vector<Tensor<T>> skips;
    Tensor<T> x = image;
    for (auto& enc : encoders_) {
      Tensor<T> f = enc(x, mode, tape);
      skips.push_back(f);
      x = maxpool2d(f, tape);
    }
    x = bottleneck_(x, mode, tape);

    ForwardResult<T> result;
    std::size_t head_idx = 0;
    for (auto& dec : decoders_) {
      Tensor<T> up = dec.up_conv(upsample_bilinear(x, 2, tape), tape);
      const Tensor<T>& skip = skips[dec.level];
      Tensor<T> att;
      if (cfg_.use_attention) {
        auto [out, maps] = dab(skip, up, dec.dab, tape);
        att = out;
        result.maps.push_back(maps);
      } else {
        att = skip;
      }
      Tensor<T> edge = edge_features(skip);
      Tensor<T> fused = concat_channels<T>({up, att, edge}, tape);
      x = dec.fuse2(dec.fuse1(fused, mode, tape), mode, tape);
      if (dec.level > 0) {
        Tensor<T> logits = heads_[head_idx++](x, tape);
        result.aux_probs.push_back(sigmoid(upsample_bilinear(logits, 1 << dec.level, tape), tape));
      }
    }
    result.main_probs = sigmoid(final_head_(x, tape), tape);
    return result;
  }

  // Learnable tensors in a stable order (construction order).
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> params, buffers;
    collect(params, buffers);
    return params;
  }

  // Non-learnable state (batchnorm running statistics).
  NamedTensors<T> named_buffers() const {
    NamedTensors<T> params, buffers;
    collect(params, buffers);
    return buffers;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }

  // Deep copy with fresh storages.
  DaduModel clone() const {
    DaduModel copy(cfg_, 0);
    auto src_p = named_parameters();
    auto dst_p = copy.named_parameters();
    for (std::size_t i = 0; i < src_p.size(); ++i)
      std::copy_n(src_p[i].second.val().data(), src_p[i].second.numel(), dst_p[i].second.val().data());
    auto src_b = named_buffers();
    auto dst_b = copy.named_buffers();
    for (std::size_t i = 0; i < src_b.size(); ++i)
      std::copy_n(src_b[i].second.val().data(), src_b[i].second.numel(), dst_b[i].second.val().data());
    return copy;
  }

 private:
  struct DecoderLevel {
    int level{0};
    Conv2dLayer<T> up_conv;
    DabState<T> dab;
    ConvBnRelu<T> fuse1, fuse2;
  };

  void collect(NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    for (std::size_t i = 0; i < encoders_.size(); ++i)
      encoders_[i].collect("enc" + std::to_string(i), params, buffers);
    bottleneck_.collect("bottleneck", params, buffers);
    for (const auto& dec : decoders_) {
      const std::string prefix = "dec" + std::to_string(dec.level);
      dec.up_conv.collect(prefix + ".up_conv", params);
      if (cfg_.use_attention) dec.dab.collect(prefix + ".dab", params);
      dec.fuse1.collect(prefix + ".fuse1", params, buffers);
      dec.fuse2.collect(prefix + ".fuse2", params, buffers);
    }
    for (std::size_t i = 0; i < heads_.size(); ++i) heads_[i].collect("head" + std::to_string(i), params);
    final_head_.collect("final_head", params);
  }

  ModelConfig cfg_;
  std::vector<DenseBlock<T>> encoders_;
  DenseBlock<T> bottleneck_;
  std::vector<DecoderLevel> decoders_;
  std::vector<Conv2dLayer<T>> heads_;
  Conv2dLayer<T> final_head_;
};

}  // namespace dadu
