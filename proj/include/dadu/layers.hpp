#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dadu/ops.hpp"

namespace dadu {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

// Convolution weights + bias. Weight layout [outC, inC, kH, kW], fan-in
// scaled uniform init, zero bias.
template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride{1};
  int padding{0};

  static Conv2dLayer make(int out_c, int in_c, int k, int padding, std::mt19937_64& rng) {
    Conv2dLayer layer;
    layer.weight = Tensor<T>(Shape4{out_c, in_c, k, k});
    const T bound = T(1) / std::sqrt(T(in_c) * T(k) * T(k));
    layer.weight.fill_uniform(rng, -bound, bound);
    layer.weight.set_requires_grad(true);
    layer.bias = Tensor<T>(Shape4{1, out_c, 1, 1});
    layer.bias.set_requires_grad(true);
    layer.padding = padding;
    return layer;
  }

  Tensor<T> operator()(const Tensor<T>& x, Tape<T>* tape) const {
    return conv2d(x, weight, bias, stride, padding, tape);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.emplace_back(prefix + ".weight", weight);
    params.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps{T(1e-5)};
  T momentum{T(0.1)};

  static BatchNormLayer make(int channels) {
    BatchNormLayer bn;
    bn.gamma = Tensor<T>(Shape4{1, channels, 1, 1}, T(1));
    bn.gamma.set_requires_grad(true);
    bn.beta = Tensor<T>(Shape4{1, channels, 1, 1});
    bn.beta.set_requires_grad(true);
    bn.running_mean = Tensor<T>(Shape4{1, channels, 1, 1});
    bn.running_var = Tensor<T>(Shape4{1, channels, 1, 1}, T(1));
    return bn;
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, Tape<T>* tape) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, mode, eps, momentum, tape);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    params.emplace_back(prefix + ".gamma", gamma);
    params.emplace_back(prefix + ".beta", beta);
    buffers.emplace_back(prefix + ".running_mean", running_mean);
    buffers.emplace_back(prefix + ".running_var", running_var);
  }
};

}  // namespace dadu
