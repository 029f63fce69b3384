#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage (copying the handle aliases
// the buffer; use clone() for a deep copy). Differentiable operations record a
// backward closure on the tape that is active on the calling thread. With no
// active tape every operation runs in inference mode and records nothing.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "condistfl/errors.hpp"

namespace condistfl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const Tape<T>* tape = nullptr;  // producing tape, null for leaves

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_extents(shape);
    impl_->data.assign(numel_of(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_extents(shape);
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Same values in a fresh buffer, cut off from every tape.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  /// Deep copy that keeps the requires_grad flag but no tape history.
  Tensor clone() const {
    Tensor out(shape(), impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  /// The tape this tensor was produced on, or nullptr for leaves and inference results.
  const Tape<T>* tape() const { return impl_->tape; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Internal: used by operations to wire backward closures.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void check_extents(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Ordered record of differentiable operations executed while it was active.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Replays the recorded operations in reverse, accumulating into every
  /// requires_grad ancestor of `loss`. A tape supports exactly one call.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw TapeError("backward() called twice on the same tape");
    if (!loss.defined() || loss.numel() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " +
                      (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.requires_grad() && loss.tape() != nullptr && loss.tape() != this) {
      throw TapeError("loss was recorded on a different tape");
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.impl()->grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not reachable from the loss
      it->backward(it->output->grad);
    }
  }

  struct Entry {
    std::shared_ptr<detail::TensorImpl<T>> output;
    std::function<void(const std::vector<T>&)> backward;
  };

  void push(Entry entry) {
    if (consumed_) throw TapeError("recording on a tape that was already consumed");
    entries_.push_back(std::move(entry));
  }

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

namespace detail {
template <typename T>
inline thread_local Tape<T>* active_tape = nullptr;
}  // namespace detail

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>) { detail::active_tape<T> = &tape; }
  ~TapeScope() { detail::active_tape<T> = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on this thread (inference, teacher forward passes).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape<T>) { detail::active_tape<T> = nullptr; }
  ~NoGradScope() { detail::active_tape<T> = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T, typename... Inputs>
bool any_requires_grad(const Inputs&... inputs) {
  return (inputs.requires_grad() || ...);
}

// Registers `fn` as the backward closure of `out` if recording is on and any
// input needs a gradient. Returns true when recorded.
template <typename T, typename Fn, typename... Inputs>
bool record(Tensor<T>& out, Fn&& fn, const Inputs&... inputs) {
  Tape<T>* tape = active_tape<T>;
  if (tape == nullptr || !any_requires_grad<T>(inputs...)) return false;
  out.set_requires_grad(true);
  out.impl()->tape = tape;
  tape->push({out.impl(), std::forward<Fn>(fn)});
  return true;
}

}  // namespace detail

}  // namespace condistfl
