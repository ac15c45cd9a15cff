#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dadu/common.hpp"
#include "dadu/tape.hpp"
#include "dadu/tensor.hpp"

namespace dadu {

enum class Mode { kTrain, kEval };

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapC = Eigen::Map<const MatRM<T>>;

// Reusable per-thread scratch; each op uses its slot within one call only.
template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> bufs[4];
  return bufs[slot];
}

template <typename T>
void mark_output(Tensor<T>& y, Tape<T>* tape, bool track) {
  if (tape) {
    y.set_tape_tag(tape);
    if (track) y.set_requires_grad(true);
  }
}

inline bool broadcastable(const Shape4& a, const Shape4& b) {
  auto ok = [](int ae, int be) { return be == ae || be == 1; };
  return ok(a.n, b.n) && ok(a.c, b.c) && ok(a.h, b.h) && ok(a.w, b.w);
}

// Gathers conv patches of one image into col [inC*kH*kW, oH*oW].
template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* col) {
  const std::size_t ohw = std::size_t(oh) * ow;
  for (int ic = 0; ic < c; ++ic) {
    const T* xc = x + std::size_t(ic) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (std::size_t(ic) * kh * kw + std::size_t(ky) * kw + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          T* dst = row + std::size_t(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + std::size_t(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds col [inC*kH*kW, oH*oW] back onto one image's gradient.
template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* gx) {
  const std::size_t ohw = std::size_t(oh) * ow;
  for (int ic = 0; ic < c; ++ic) {
    T* gc = gx + std::size_t(ic) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (std::size_t(ic) * kh * kw + std::size_t(ky) * kw + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + std::size_t(oy) * ow;
          T* dst = gc + std::size_t(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (deep-learning convolution convention, no kernel flip).
// kernel is [outC, inC, kH, kW]; bias, when defined, is [1, outC, 1, 1].
// The hot path is im2col followed by a matrix product per batch item.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int stride, int padding,
                 Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const Shape4& ks = kernel.shape();
  if (ks.c != xs.c)
    throw ShapeError(detail::cat("conv2d: kernel expects ", ks.c, " input channels, input has ", xs.c, " (input ",
                                 to_string(xs), ", kernel ", to_string(ks), ")"));
  if (bias.defined() && !(bias.shape() == Shape4{1, ks.n, 1, 1}))
    throw ShapeError(detail::cat("conv2d: bias must be [1,", ks.n, ",1,1], got ", to_string(bias.shape())));
  if (stride < 1 || padding < 0) throw ValueError("conv2d: stride must be >= 1 and padding >= 0");
  const int num_h = xs.h + 2 * padding - ks.h;
  const int num_w = xs.w + 2 * padding - ks.w;
  if (num_h < 0 || num_w < 0)
    throw ShapeError(detail::cat("conv2d: kernel ", ks.h, "x", ks.w, " exceeds padded input ", xs.h + 2 * padding,
                                 "x", xs.w + 2 * padding));
  if (num_h % stride != 0 || num_w % stride != 0)
    throw ShapeError(detail::cat("conv2d: non-integral output extent for input ", to_string(xs), ", kernel ",
                                 to_string(ks), ", stride ", stride, ", padding ", padding));
  const int oh = num_h / stride + 1;
  const int ow = num_w / stride + 1;

  Tensor<T> y(Shape4{xs.n, ks.n, oh, ow});
  const std::size_t k_cols = std::size_t(xs.c) * ks.h * ks.w;
  const std::size_t ohw = std::size_t(oh) * ow;
  auto& col = detail::scratch<T>(0);
  col.resize(k_cols * ohw);

  detail::MapC<T> kmat(kernel.val().data(), ks.n, k_cols);
  for (int b = 0; b < xs.n; ++b) {
    detail::im2col(x.val().data() + std::size_t(b) * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w, ks.h, ks.w, stride,
                   padding, oh, ow, col.data());
    detail::MapC<T> cmat(col.data(), k_cols, ohw);
    detail::MapM<T> ymat(y.val().data() + std::size_t(b) * ks.n * ohw, ks.n, ohw);
    ymat.noalias() = kmat * cmat;
  }
  if (bias.defined()) {
    auto yv = y.val();
    auto bv = bias.val();
    for (int b = 0; b < xs.n; ++b)
      for (int oc = 0; oc < ks.n; ++oc) {
        T* row = yv.data() + (std::size_t(b) * ks.n + oc) * ohw;
        for (std::size_t i = 0; i < ohw; ++i) row[i] += bv[oc];
      }
  }

  const bool track = x.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad());
  detail::mark_output(y, tape, track);
  if (tape && track) {
    tape->record([x, kernel, bias, y, stride, padding, oh, ow]() mutable {
      const Shape4& xs = x.shape();
      const Shape4& ks = kernel.shape();
      const std::size_t k_cols = std::size_t(xs.c) * ks.h * ks.w;
      const std::size_t ohw = std::size_t(oh) * ow;
      auto gy = y.grad();
      auto& col = detail::scratch<T>(0);
      auto& dcol = detail::scratch<T>(1);
      detail::MapC<T> kmat(kernel.val().data(), ks.n, k_cols);
      for (int b = 0; b < xs.n; ++b) {
        detail::MapC<T> gymat(gy.data() + std::size_t(b) * ks.n * ohw, ks.n, ohw);
        if (x.requires_grad()) {
          dcol.resize(k_cols * ohw);
          detail::MapM<T> dcmat(dcol.data(), k_cols, ohw);
          dcmat.noalias() = kmat.transpose() * gymat;
          detail::col2im_add(dcol.data(), xs.c, xs.h, xs.w, ks.h, ks.w, stride, padding, oh, ow,
                             x.grad().data() + std::size_t(b) * xs.c * xs.h * xs.w);
        }
        if (kernel.requires_grad()) {
          col.resize(k_cols * ohw);
          detail::im2col(x.val().data() + std::size_t(b) * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w, ks.h, ks.w, stride,
                         padding, oh, ow, col.data());
          detail::MapC<T> cmat(col.data(), k_cols, ohw);
          detail::MapM<T> gkmat(kernel.grad().data(), ks.n, k_cols);
          gkmat.noalias() += gymat * cmat.transpose();
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad();
          for (int oc = 0; oc < ks.n; ++oc) {
            const T* row = gy.data() + (std::size_t(b) * ks.n + oc) * ohw;
            T acc = T(0);
            for (std::size_t i = 0; i < ohw; ++i) acc += row[i];
            gb[oc] += acc;
          }
        }
      }
    });
  }
  return y;
}

// 2x2 max pooling, stride 2. Odd extents are replicate-padded on the last
// row/column. Backward routes the gradient to the argmax cell only; the
// first cell in row-major window order wins ties.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const int oh = (xs.h + 1) / 2;
  const int ow = (xs.w + 1) / 2;
  Tensor<T> y(Shape4{xs.n, xs.c, oh, ow});
  std::vector<std::int32_t> argmax(y.numel());

  auto xv = x.val();
  auto yv = y.val();
  std::size_t o = 0;
  for (int b = 0; b < xs.n; ++b)
    for (int c = 0; c < xs.c; ++c) {
      const T* plane = xv.data() + (std::size_t(b) * xs.c + c) * xs.h * xs.w;
      const std::size_t base = (std::size_t(b) * xs.c + c) * xs.h * xs.w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o) {
          T best{};
          std::int32_t best_idx = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int sy = std::min(2 * oy + dy, xs.h - 1);
              const int sx = std::min(2 * ox + dx, xs.w - 1);
              const T v = plane[std::size_t(sy) * xs.w + sx];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = std::int32_t(base + std::size_t(sy) * xs.w + sx);
              }
            }
          yv[o] = best;
          argmax[o] = best_idx;
        }
    }

  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, argmax = std::move(argmax)]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return y;
}

// Per-channel spatial mean -> [n, c, 1, 1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const std::size_t hw = std::size_t(xs.h) * xs.w;
  Tensor<T> y(Shape4{xs.n, xs.c, 1, 1});
  auto xv = x.val();
  auto yv = y.val();
  for (std::size_t p = 0; p < yv.size(); ++p) {
    const T* plane = xv.data() + p * hw;
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
    yv[p] = acc / T(hw);
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, hw]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t p = 0; p < gy.size(); ++p) {
        const T g = gy[p] / T(hw);
        T* plane = gx.data() + p * hw;
        for (std::size_t i = 0; i < hw; ++i) plane[i] += g;
      }
    });
  }
  return y;
}

// Per-channel spatial max -> [n, c, 1, 1]; gradient goes to the argmax cell
// (first in row-major order on ties).
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const std::size_t hw = std::size_t(xs.h) * xs.w;
  Tensor<T> y(Shape4{xs.n, xs.c, 1, 1});
  std::vector<std::int32_t> argmax(y.numel());
  auto xv = x.val();
  auto yv = y.val();
  for (std::size_t p = 0; p < yv.size(); ++p) {
    const T* plane = xv.data() + p * hw;
    T best = plane[0];
    std::size_t idx = 0;
    for (std::size_t i = 1; i < hw; ++i)
      if (plane[i] > best) {
        best = plane[i];
        idx = i;
      }
    yv[p] = best;
    argmax[p] = std::int32_t(p * hw + idx);
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, argmax = std::move(argmax)]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t p = 0; p < gy.size(); ++p) gx[argmax[p]] += gy[p];
    });
  }
  return y;
}

// Per-pixel mean across channels -> [n, 1, h, w].
template <typename T>
Tensor<T> channelwise_avg(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const std::size_t hw = std::size_t(xs.h) * xs.w;
  Tensor<T> y(Shape4{xs.n, 1, xs.h, xs.w});
  auto xv = x.val();
  auto yv = y.val();
  for (int b = 0; b < xs.n; ++b) {
    T* out = yv.data() + std::size_t(b) * hw;
    const T* in = xv.data() + std::size_t(b) * xs.c * hw;
    std::fill(out, out + hw, T(0));
    for (int c = 0; c < xs.c; ++c) {
      const T* plane = in + std::size_t(c) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[i] += plane[i];
    }
    for (std::size_t i = 0; i < hw; ++i) out[i] /= T(xs.c);
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, hw]() mutable {
      const Shape4& xs = x.shape();
      auto gy = y.grad();
      auto gx = x.grad();
      for (int b = 0; b < xs.n; ++b) {
        const T* g = gy.data() + std::size_t(b) * hw;
        T* gb = gx.data() + std::size_t(b) * xs.c * hw;
        for (int c = 0; c < xs.c; ++c) {
          T* plane = gb + std::size_t(c) * hw;
          for (std::size_t i = 0; i < hw; ++i) plane[i] += g[i] / T(xs.c);
        }
      }
    });
  }
  return y;
}

// Per-pixel max across channels -> [n, 1, h, w]; first channel wins ties.
template <typename T>
Tensor<T> channelwise_max(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const std::size_t hw = std::size_t(xs.h) * xs.w;
  Tensor<T> y(Shape4{xs.n, 1, xs.h, xs.w});
  std::vector<std::int32_t> argmax(y.numel());
  auto xv = x.val();
  auto yv = y.val();
  for (int b = 0; b < xs.n; ++b) {
    const std::size_t in_base = std::size_t(b) * xs.c * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      T best = xv[in_base + i];
      int best_c = 0;
      for (int c = 1; c < xs.c; ++c) {
        const T v = xv[in_base + std::size_t(c) * hw + i];
        if (v > best) {
          best = v;
          best_c = c;
        }
      }
      yv[std::size_t(b) * hw + i] = best;
      argmax[std::size_t(b) * hw + i] = std::int32_t(in_base + std::size_t(best_c) * hw + i);
    }
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, argmax = std::move(argmax)]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return y;
}

// Batch normalization over (n, h, w) per channel. Train mode normalizes by
// batch statistics and updates the running estimates in place; eval mode
// uses the running estimates. gamma/beta/running_* are [1, C, 1, 1].
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, Mode mode, T eps = T(1e-5), T momentum = T(0.1),
                      Tape<T>* tape = nullptr) {
  const Shape4& xs = x.shape();
  const Shape4 param_shape{1, xs.c, 1, 1};
  for (const auto* t : {&gamma, &beta}) {
    if (!(t->shape() == param_shape))
      throw ShapeError(detail::cat("batchnorm2d: parameter shape ", to_string(t->shape()), " does not match ",
                                   to_string(param_shape)));
  }
  if (!(running_mean.shape() == param_shape) || !(running_var.shape() == param_shape))
    throw ShapeError("batchnorm2d: running stats shape mismatch");

  const std::size_t hw = std::size_t(xs.h) * xs.w;
  const std::size_t m = std::size_t(xs.n) * hw;
  Tensor<T> y(xs);
  auto xv = x.val();
  auto yv = y.val();
  auto gv = gamma.val();
  auto bv = beta.val();

  std::vector<T> mean(xs.c), invstd(xs.c);
  if (mode == Mode::kTrain) {
    if (m < 2) throw ValueError("batchnorm2d: train mode needs a per-channel population of at least 2");
    auto rm = running_mean.val();
    auto rv = running_var.val();
    for (int c = 0; c < xs.c; ++c) {
      T sum = T(0);
      for (int b = 0; b < xs.n; ++b) {
        const T* plane = xv.data() + (std::size_t(b) * xs.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += plane[i];
      }
      const T mu = sum / T(m);
      T ss = T(0);
      for (int b = 0; b < xs.n; ++b) {
        const T* plane = xv.data() + (std::size_t(b) * xs.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = plane[i] - mu;
          ss += d * d;
        }
      }
      const T var = ss / T(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var * T(m) / T(m - 1);
    }
  } else {
    auto rm = running_mean.val();
    auto rv = running_var.val();
    for (int c = 0; c < xs.c; ++c) {
      mean[c] = rm[c];
      invstd[c] = T(1) / std::sqrt(rv[c] + eps);
    }
  }

  for (int b = 0; b < xs.n; ++b)
    for (int c = 0; c < xs.c; ++c) {
      const T* in = xv.data() + (std::size_t(b) * xs.c + c) * hw;
      T* out = yv.data() + (std::size_t(b) * xs.c + c) * hw;
      const T mu = mean[c], is = invstd[c], g = gv[c], bb = bv[c];
      for (std::size_t i = 0; i < hw; ++i) out[i] = g * (in[i] - mu) * is + bb;
    }

  const bool track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  detail::mark_output(y, tape, track);
  if (tape && track) {
    tape->record([x, gamma, beta, y, mode, mean = std::move(mean), invstd = std::move(invstd), m, hw]() mutable {
      const Shape4& xs = x.shape();
      auto gy = y.grad();
      auto xv = x.val();
      auto gv = gamma.val();
      for (int c = 0; c < xs.c; ++c) {
        const T mu = mean[c], is = invstd[c];
        T sum_g = T(0), sum_gx = T(0);
        for (int b = 0; b < xs.n; ++b) {
          const std::size_t off = (std::size_t(b) * xs.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const T g = gy[off + i];
            sum_g += g;
            sum_gx += g * (xv[off + i] - mu) * is;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += sum_gx;
        if (beta.requires_grad()) beta.grad()[c] += sum_g;
        if (x.requires_grad()) {
          auto gx = x.grad();
          if (mode == Mode::kTrain) {
            const T mean_g = sum_g / T(m);
            const T mean_gx = sum_gx / T(m);
            for (int b = 0; b < xs.n; ++b) {
              const std::size_t off = (std::size_t(b) * xs.c + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                const T xhat = (xv[off + i] - mu) * is;
                gx[off + i] += gv[c] * is * (gy[off + i] - mean_g - xhat * mean_gx);
              }
            }
          } else {
            for (int b = 0; b < xs.n; ++b) {
              const std::size_t off = (std::size_t(b) * xs.c + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) gx[off + i] += gy[off + i] * gv[c] * is;
            }
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> y(x.shape());
  auto xv = x.val();
  auto yv = y.val();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      auto xv = x.val();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xv[i] > T(0)) gx[i] += gy[i];
    });
  }
  return y;
}

// Logistic sigmoid, clamped to the open interval (0, 1) in the working
// precision so saturated activations never round to an exact endpoint.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  static const T lo = std::numeric_limits<T>::min();
  static const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  Tensor<T> y(x.shape());
  auto xv = x.val();
  auto yv = y.val();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    yv[i] = std::min(hi, std::max(lo, s));
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      auto yv = y.val();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
  }
  return y;
}

namespace detail {

struct BStride {
  std::size_t n, c, h, w;
};

inline BStride bstrides(const Shape4& a, const Shape4& b) {
  const std::size_t sw = 1;
  const std::size_t sh = std::size_t(b.w);
  const std::size_t sc = std::size_t(b.h) * b.w;
  const std::size_t sn = std::size_t(b.c) * b.h * b.w;
  return {b.n == 1 ? 0 : sn, b.c == 1 ? 0 : sc, b.h == 1 ? 0 : sh, b.w == 1 ? 0 : sw};
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> broadcast_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape, FwdFn fwd,
                           BwdFn bwd) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  if (!broadcastable(as, bs))
    throw ShapeError(detail::cat(op, ": shape ", to_string(bs), " does not broadcast against ", to_string(as)));
  Tensor<T> y(as);
  const BStride st = bstrides(as, bs);
  auto av = a.val();
  auto bv = b.val();
  auto yv = y.val();
  std::size_t i = 0;
  for (int n = 0; n < as.n; ++n)
    for (int c = 0; c < as.c; ++c)
      for (int h = 0; h < as.h; ++h) {
        std::size_t ib = std::size_t(n) * st.n + std::size_t(c) * st.c + std::size_t(h) * st.h;
        for (int w = 0; w < as.w; ++w, ++i) yv[i] = fwd(av[i], bv[ib + std::size_t(w) * st.w]);
      }
  const bool track = a.requires_grad() || b.requires_grad();
  mark_output(y, tape, track);
  if (tape && track) {
    tape->record([a, b, y, st, bwd]() mutable {
      const Shape4& as = a.shape();
      auto av = a.val();
      auto bv = b.val();
      auto gy = y.grad();
      auto ga = a.requires_grad() ? a.grad() : std::span<T>{};
      auto gb = b.requires_grad() ? b.grad() : std::span<T>{};
      std::size_t i = 0;
      for (int n = 0; n < as.n; ++n)
        for (int c = 0; c < as.c; ++c)
          for (int h = 0; h < as.h; ++h) {
            std::size_t base = std::size_t(n) * st.n + std::size_t(c) * st.c + std::size_t(h) * st.h;
            for (int w = 0; w < as.w; ++w, ++i)
              bwd(gy[i], av[i], bv[base + std::size_t(w) * st.w], ga.empty() ? nullptr : &ga[i],
                  gb.empty() ? nullptr : &gb[base + std::size_t(w) * st.w]);
          }
    });
  }
  return y;
}

}  // namespace detail

// Elementwise a + b. b may broadcast against a along any axes where its
// extent is 1 (covers the [n,c,1,1] channel-map and [n,1,h,w] spatial-map
// cases); the gradient of b sums over broadcast axes.
template <typename T>
Tensor<T> elementwise_add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return detail::broadcast_binary<T>(
      "elementwise_add", a, b, tape, [](T x, T y) { return x + y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

// Elementwise a * b with the same broadcast rules as elementwise_add.
template <typename T>
Tensor<T> elementwise_mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return detail::broadcast_binary<T>(
      "elementwise_mul", a, b, tape, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T* ga, T* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

// Stacks parts along the channel axis in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts, Tape<T>* tape = nullptr) {
  if (parts.empty()) throw ValueError("concat_channels: no inputs");
  const Shape4& s0 = parts[0].shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape4& ps = p.shape();
    if (ps.n != s0.n || ps.h != s0.h || ps.w != s0.w)
      throw ShapeError(detail::cat("concat_channels: part shape ", to_string(ps), " does not match ", to_string(s0),
                                   " on n/h/w"));
    total_c += ps.c;
  }
  Tensor<T> y(Shape4{s0.n, total_c, s0.h, s0.w});
  const std::size_t hw = std::size_t(s0.h) * s0.w;
  auto yv = y.val();
  bool track = false;
  for (int b = 0; b < s0.n; ++b) {
    std::size_t dst_c = 0;
    for (const auto& p : parts) {
      auto pv = p.val();
      const int pc = p.shape().c;
      std::copy_n(pv.data() + std::size_t(b) * pc * hw, std::size_t(pc) * hw,
                  yv.data() + (std::size_t(b) * total_c + dst_c) * hw);
      dst_c += pc;
    }
  }
  for (const auto& p : parts) track = track || p.requires_grad();
  detail::mark_output(y, tape, track);
  if (tape && track) {
    tape->record([parts, y, total_c, hw]() mutable {
      const Shape4& s0 = parts[0].shape();
      auto gy = y.grad();
      for (int b = 0; b < s0.n; ++b) {
        std::size_t src_c = 0;
        for (auto& p : parts) {
          const int pc = p.shape().c;
          if (p.requires_grad()) {
            auto gp = p.grad();
            const T* src = gy.data() + (std::size_t(b) * total_c + src_c) * hw;
            T* dst = gp.data() + std::size_t(b) * pc * hw;
            for (std::size_t i = 0; i < std::size_t(pc) * hw; ++i) dst[i] += src[i];
          }
          src_c += pc;
        }
      }
    });
  }
  return y;
}

namespace detail {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

inline LerpAxis bilinear_axis(int in, int out) {
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.frac.resize(out);
  const double scale = double(in) / double(out);
  for (int o = 0; o < out; ++o) {
    const double s = (o + 0.5) * scale - 0.5;
    const double f = std::floor(s);
    const int i0 = int(f);
    ax.i0[o] = std::clamp(i0, 0, in - 1);
    ax.i1[o] = std::clamp(i0 + 1, 0, in - 1);
    ax.frac[o] = s - f;
  }
  return ax;
}

}  // namespace detail

// Bilinear upsampling by an integer factor, align-corners-false convention.
// Backward applies the transpose of the interpolation weights.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor, Tape<T>* tape = nullptr) {
  if (factor < 1) throw ValueError("upsample_bilinear: factor must be >= 1");
  const Shape4& xs = x.shape();
  const int oh = xs.h * factor, ow = xs.w * factor;
  const detail::LerpAxis ay = detail::bilinear_axis(xs.h, oh);
  const detail::LerpAxis ax = detail::bilinear_axis(xs.w, ow);
  Tensor<T> y(Shape4{xs.n, xs.c, oh, ow});
  auto xv = x.val();
  auto yv = y.val();
  const std::size_t planes = std::size_t(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = xv.data() + p * xs.h * xs.w;
    T* out = yv.data() + p * std::size_t(oh) * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const T fy = T(ay.frac[oy]);
      const T* r0 = in + std::size_t(ay.i0[oy]) * xs.w;
      const T* r1 = in + std::size_t(ay.i1[oy]) * xs.w;
      for (int ox = 0; ox < ow; ++ox) {
        const T fx = T(ax.frac[ox]);
        const T v0 = r0[ax.i0[ox]] * (T(1) - fx) + r0[ax.i1[ox]] * fx;
        const T v1 = r1[ax.i0[ox]] * (T(1) - fx) + r1[ax.i1[ox]] * fx;
        out[std::size_t(oy) * ow + ox] = v0 * (T(1) - fy) + v1 * fy;
      }
    }
  }
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y, ay, ax, oh, ow]() mutable {
      const Shape4& xs = x.shape();
      auto gy = y.grad();
      auto gx = x.grad();
      const std::size_t planes = std::size_t(xs.n) * xs.c;
      for (std::size_t p = 0; p < planes; ++p) {
        const T* gout = gy.data() + p * std::size_t(oh) * ow;
        T* gin = gx.data() + p * xs.h * xs.w;
        for (int oy = 0; oy < oh; ++oy) {
          const T fy = T(ay.frac[oy]);
          T* r0 = gin + std::size_t(ay.i0[oy]) * xs.w;
          T* r1 = gin + std::size_t(ay.i1[oy]) * xs.w;
          for (int ox = 0; ox < ow; ++ox) {
            const T fx = T(ax.frac[ox]);
            const T g = gout[std::size_t(oy) * ow + ox];
            r0[ax.i0[ox]] += g * (T(1) - fy) * (T(1) - fx);
            r0[ax.i1[ox]] += g * (T(1) - fy) * fx;
            r1[ax.i0[ox]] += g * fy * (T(1) - fx);
            r1[ax.i1[ox]] += g * fy * fx;
          }
        }
      }
    });
  }
  return y;
}

// Sum of all elements -> scalar [1,1,1,1].
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> y(Shape4{1, 1, 1, 1});
  auto xv = x.val();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  y.val()[0] = acc;
  detail::mark_output(y, tape, x.requires_grad());
  if (tape && x.requires_grad()) {
    tape->record([x, y]() mutable {
      const T g = y.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

}  // namespace dadu
