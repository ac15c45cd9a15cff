#pragma once

#include <functional>
#include <vector>

#include "dadu/common.hpp"
#include "dadu/tensor.hpp"

namespace dadu {

// Define-by-run gradient tape. Each executed op appends one backward rule;
// rules are closures over the op's operands (shared tensor handles), so the
// tape is the ordered record of the forward pass. Replaying the rules in
// reverse accumulates d(loss)/d(tensor) into every tracked tensor exactly
// once per use. The tape owns nothing else and is rebuilt per forward pass.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_rule) { nodes_.push_back(std::move(backward_rule)); }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  bool owns(const Tensor<T>& t) const { return t.defined() && t.tape_tag() == this; }

  // Seeds d(loss) = 1 and replays all rules in reverse order. Calling twice
  // without zeroing gradients accumulates.
  void backward(Tensor<T>& loss) {
    if (!owns(loss)) throw ValueError("backward: loss tensor was not produced under this tape");
    if (loss.numel() != 1)
      throw ShapeError(detail::cat("backward: loss must be scalar [1,1,1,1], got ", to_string(loss.shape())));
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

}  // namespace dadu
