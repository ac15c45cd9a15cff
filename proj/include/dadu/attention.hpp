#pragma once

#include <random>
#include <utility>

#include "dadu/layers.hpp"
#include "dadu/ops.hpp"

namespace dadu {

// Channel attention parameters: one learnable weight per channel, applied to
// the merged pooled statistics before the sigmoid. Initialized to 1 so the
// block starts close to a plain skip connection.
template <typename T>
struct CamState {
  Tensor<T> channel_weights;  // [1, C, 1, 1]

  static CamState make(int channels) {
    CamState s;
    s.channel_weights = Tensor<T>(Shape4{1, channels, 1, 1}, T(1));
    s.channel_weights.set_requires_grad(true);
    return s;
  }

  int channels() const { return channel_weights.shape().c; }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.emplace_back(prefix + ".channel_weights", channel_weights);
  }
};

// Spatial attention parameters. Encoder and decoder sides carry independent
// 1x1 (C -> 1) and 7x7 (3 -> 1, padding 3) kernels; the 7x7 input channels
// are the avg / max / 1x1 branch maps.
template <typename T>
struct SamState {
  Conv2dLayer<T> conv1x1_enc, conv1x1_dec;
  Conv2dLayer<T> conv7x7_enc, conv7x7_dec;

  static SamState make(int channels, std::mt19937_64& rng) {
    SamState s;
    s.conv1x1_enc = Conv2dLayer<T>::make(1, channels, 1, 0, rng);
    s.conv1x1_dec = Conv2dLayer<T>::make(1, channels, 1, 0, rng);
    s.conv7x7_enc = Conv2dLayer<T>::make(1, 3, 7, 3, rng);
    s.conv7x7_dec = Conv2dLayer<T>::make(1, 3, 7, 3, rng);
    return s;
  }

  int channels() const { return conv1x1_enc.weight.shape().c; }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    conv1x1_enc.collect(prefix + ".conv1x1_enc", params);
    conv1x1_dec.collect(prefix + ".conv1x1_dec", params);
    conv7x7_enc.collect(prefix + ".conv7x7_enc", params);
    conv7x7_dec.collect(prefix + ".conv7x7_dec", params);
  }
};

template <typename T>
struct DabState {
  CamState<T> cam;
  SamState<T> sam;

  static DabState make(int channels, std::mt19937_64& rng) {
    return DabState{CamState<T>::make(channels), SamState<T>::make(channels, rng)};
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    cam.collect(prefix + ".cam", params);
    sam.collect(prefix + ".sam", params);
  }
};

// Diagnostic attention maps; every entry lies strictly in (0, 1).
template <typename T>
struct AttentionMaps {
  Tensor<T> m_ch;  // [n, C, 1, 1]
  Tensor<T> m_sp;  // [n, 1, h, w]
};

namespace detail {

template <typename T>
void check_pair(const char* op, const Tensor<T>& e, const Tensor<T>& d, int channels) {
  if (!(e.shape() == d.shape()))
    throw ShapeError(detail::cat(op, ": encoder ", to_string(e.shape()), " and decoder ", to_string(d.shape()),
                                 " shapes differ"));
  if (e.shape().c != channels)
    throw ShapeError(detail::cat(op, ": state is sized for ", channels, " channels, inputs have ", e.shape().c));
}

}  // namespace detail

// Per channel c: m_ch[c] = sigmoid(w_c * (avg_c(E) + max_c(E) + avg_c(D) + max_c(D))).
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& f_enc, const Tensor<T>& f_dec, const CamState<T>& state,
                            Tape<T>* tape = nullptr) {
  detail::check_pair("channel_attention", f_enc, f_dec, state.channels());
  Tensor<T> m_enc = elementwise_add(global_avg_pool(f_enc, tape), global_max_pool(f_enc, tape), tape);
  Tensor<T> m_dec = elementwise_add(global_avg_pool(f_dec, tape), global_max_pool(f_dec, tape), tape);
  Tensor<T> merged = elementwise_add(m_enc, m_dec, tape);
  return sigmoid(elementwise_mul(merged, state.channel_weights, tape), tape);
}

// Per side S: M_S = conv7x7_S(concat(chan_avg(F_S), chan_max(F_S), conv1x1_S(F_S)));
// m_sp = sigmoid(M_enc + M_dec), shape [n, 1, h, w].
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& f_ch_enc, const Tensor<T>& f_ch_dec, const SamState<T>& state,
                            Tape<T>* tape = nullptr) {
  detail::check_pair("spatial_attention", f_ch_enc, f_ch_dec, state.channels());
  auto side = [&](const Tensor<T>& f, const Conv2dLayer<T>& c1, const Conv2dLayer<T>& c7) {
    Tensor<T> branches = concat_channels<T>({channelwise_avg(f, tape), channelwise_max(f, tape), c1(f, tape)}, tape);
    return c7(branches, tape);
  };
  Tensor<T> m_enc = side(f_ch_enc, state.conv1x1_enc, state.conv7x7_enc);
  Tensor<T> m_dec = side(f_ch_dec, state.conv1x1_dec, state.conv7x7_dec);
  return sigmoid(elementwise_add(m_enc, m_dec, tape), tape);
}

// Dual attention block: channel gate on each side, spatial gate on the
// merged gated pair. frozen, when given, substitutes both maps (test hook).
template <typename T>
std::pair<Tensor<T>, AttentionMaps<T>> dab(const Tensor<T>& f_enc, const Tensor<T>& f_dec, const DabState<T>& state,
                                           Tape<T>* tape = nullptr, const AttentionMaps<T>* frozen = nullptr) {
  detail::check_pair("dab", f_enc, f_dec, state.cam.channels());
  Tensor<T> m_ch = frozen ? frozen->m_ch : channel_attention(f_enc, f_dec, state.cam, tape);
  Tensor<T> f_ch_enc = elementwise_mul(f_enc, m_ch, tape);
  Tensor<T> f_ch_dec = elementwise_mul(f_dec, m_ch, tape);
  Tensor<T> m_sp = frozen ? frozen->m_sp : spatial_attention(f_ch_enc, f_ch_dec, state.sam, tape);
  Tensor<T> merged = elementwise_add(f_ch_enc, f_ch_dec, tape);
  Tensor<T> out = elementwise_mul(merged, m_sp, tape);
  return {out, AttentionMaps<T>{m_ch, m_sp}};
}

}  // namespace dadu
