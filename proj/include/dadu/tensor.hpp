#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dadu/common.hpp"

namespace dadu {

// Extents of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape4 {
  int n{1}, c{1}, h{1}, w{1};

  std::size_t numel() const {
    return std::size_t(n) * std::size_t(c) * std::size_t(h) * std::size_t(w);
  }
  std::size_t index(int in, int ic, int iy, int ix) const {
    return ((std::size_t(in) * c + ic) * h + iy) * w + ix;
  }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  bool operator==(const Shape4&) const = default;
};

inline std::string to_string(const Shape4& s) {
  return detail::cat('[', s.n, ',', s.c, ',', s.h, ',', s.w, ']');
}

// Dense rank-4 tensor with an optional gradient buffer. Copies are shallow:
// a Tensor is a shared handle, so backward rules can capture operands by
// value and accumulate into the same storage the caller sees.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(const Shape4& shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    if (!shape.valid()) throw ShapeError(detail::cat("tensor extents must be >= 1, got ", to_string(shape)));
    s_->shape = shape;
    s_->val.assign(shape.numel(), fill);
  }

  static Tensor from_values(const Shape4& shape, std::vector<T> values) {
    Tensor t(shape);
    if (values.size() != shape.numel())
      throw ShapeError(detail::cat("value count ", values.size(), " does not match shape ", to_string(shape)));
    t.s_->val = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape4& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->shape.numel(); }

  std::span<T> val() { return s_->val; }
  std::span<const T> val() const { return s_->val; }

  T& at(int n, int c, int y, int x) { return s_->val[s_->shape.index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return s_->val[s_->shape.index(n, c, y, x)]; }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    s_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }

  // Gradient buffer, allocated (zeroed) on first access.
  std::span<T> grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->val.size(), T(0));
    return s_->grad;
  }
  std::span<const T> grad_view() const { return s_->grad; }

  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void drop_grad() { s_->grad.clear(); }

  const std::string& name() const { return s_->name; }
  Tensor& set_name(std::string n) {
    s_->name = std::move(n);
    return *this;
  }

  // Identity of the underlying storage; two handles alias iff ids are equal.
  const void* id() const { return s_.get(); }

  // Internal: tag of the tape whose op produced this tensor.
  const void* tape_tag() const { return s_ ? s_->tape : nullptr; }
  void set_tape_tag(const void* tag) { s_->tape = tag; }

  // Deep copy of values; gradient state and tape tag are not copied.
  Tensor clone() const {
    Tensor t(s_->shape);
    t.s_->val = s_->val;
    t.s_->requires_grad = s_->requires_grad;
    t.s_->name = s_->name;
    return t;
  }

  void fill_uniform(std::mt19937_64& rng, T lo, T hi) {
    std::uniform_real_distribution<T> dist(lo, hi);
    for (auto& v : s_->val) v = dist(rng);
  }

  void fill_normal(std::mt19937_64& rng, T mean, T sigma) {
    std::normal_distribution<T> dist(mean, sigma);
    for (auto& v : s_->val) v = dist(rng);
  }

 private:
  struct Storage {
    Shape4 shape;
    std::vector<T> val;
    std::vector<T> grad;
    bool requires_grad{false};
    const void* tape{nullptr};
    std::string name;
  };
  std::shared_ptr<Storage> s_;
};

}  // namespace dadu
