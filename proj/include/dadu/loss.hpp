#pragma once

#include <vector>

#include "dadu/ops.hpp"

namespace dadu {

// Soft Dice loss: 1 - mean over (batch, class) of
//   (2 * sum(p*t) + smooth) / (sum(p) + sum(t) + smooth).
// Fused node with the analytic gradient for both operands.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, T smooth = T(1), Tape<T>* tape = nullptr) {
  const Shape4& s = probs.shape();
  if (!(target.shape() == s))
    throw ShapeError(detail::cat("dice_loss: probs ", to_string(s), " and target ", to_string(target.shape()),
                                 " shapes differ"));
  const std::size_t hw = std::size_t(s.h) * s.w;
  const std::size_t planes = std::size_t(s.n) * s.c;
  auto pv = probs.val();
  auto tv = target.val();

  std::vector<T> sum_pt(planes), sum_p(planes), sum_t(planes);
  T acc = T(0);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* p = pv.data() + pl * hw;
    const T* t = tv.data() + pl * hw;
    T spt = T(0), sp = T(0), st = T(0);
    for (std::size_t i = 0; i < hw; ++i) {
      spt += p[i] * t[i];
      sp += p[i];
      st += t[i];
    }
    sum_pt[pl] = spt;
    sum_p[pl] = sp;
    sum_t[pl] = st;
    acc += (T(2) * spt + smooth) / (sp + st + smooth);
  }
  Tensor<T> loss(Shape4{1, 1, 1, 1});
  loss.val()[0] = T(1) - acc / T(planes);

  const bool track = probs.requires_grad() || target.requires_grad();
  detail::mark_output(loss, tape, track);
  if (tape && track) {
    tape->record([probs, target, loss, smooth, hw, planes, sum_pt = std::move(sum_pt), sum_p = std::move(sum_p),
                  sum_t = std::move(sum_t)]() mutable {
      const T g = loss.grad()[0];
      auto pv = probs.val();
      auto tv = target.val();
      const T scale = -g / T(planes);
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const T denom = sum_p[pl] + sum_t[pl] + smooth;
        const T num = T(2) * sum_pt[pl] + smooth;
        const T inv_d2 = T(1) / (denom * denom);
        if (probs.requires_grad()) {
          auto gp = probs.grad();
          const T* t = tv.data() + pl * hw;
          T* gout = gp.data() + pl * hw;
          for (std::size_t i = 0; i < hw; ++i) gout[i] += scale * (T(2) * t[i] * denom - num) * inv_d2;
        }
        if (target.requires_grad()) {
          auto gt = target.grad();
          const T* p = pv.data() + pl * hw;
          T* gout = gt.data() + pl * hw;
          for (std::size_t i = 0; i < hw; ++i) gout[i] += scale * (T(2) * p[i] * denom - num) * inv_d2;
        }
      }
    });
  }
  return loss;
}

// Deep-supervision combination: L = main + sum_i eta_i * aux_i over the P
// auxiliary paths. With all eta = 0 the result is bitwise the main loss.
template <typename T>
Tensor<T> deep_supervision_loss(const Tensor<T>& main_loss, const std::vector<Tensor<T>>& aux_losses,
                                const std::vector<T>& eta, Tape<T>* tape = nullptr) {
  if (aux_losses.size() != eta.size())
    throw ShapeError(detail::cat("deep_supervision_loss: ", aux_losses.size(), " auxiliary losses but ", eta.size(),
                                 " weights"));
  if (main_loss.numel() != 1) throw ShapeError("deep_supervision_loss: main loss must be scalar");
  for (const auto& a : aux_losses)
    if (a.numel() != 1) throw ShapeError("deep_supervision_loss: auxiliary losses must be scalar");
  for (T e : eta)
    if (e < T(0)) throw ValueError("deep_supervision_loss: eta weights must be >= 0");

  Tensor<T> total(Shape4{1, 1, 1, 1});
  T acc = main_loss.val()[0];
  for (std::size_t i = 0; i < aux_losses.size(); ++i) acc += eta[i] * aux_losses[i].val()[0];
  total.val()[0] = acc;

  bool track = main_loss.requires_grad();
  for (const auto& a : aux_losses) track = track || a.requires_grad();
  detail::mark_output(total, tape, track);
  if (tape && track) {
    tape->record([main_loss, aux_losses, eta, total]() mutable {
      const T g = total.grad()[0];
      if (main_loss.requires_grad()) main_loss.grad()[0] += g;
      for (std::size_t i = 0; i < aux_losses.size(); ++i)
        if (aux_losses[i].requires_grad()) aux_losses[i].grad()[0] += eta[i] * g;
    });
  }
  return total;
}

}  // namespace dadu
