#pragma once

// Differentiable tensor operations. Binary operations accept equal shapes or a
// single-element operand on either side; there is no general broadcasting.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "condistfl/tensor.hpp"

namespace condistfl {

using Mask = Tensor<std::uint8_t>;
using IndexTensor = Tensor<std::int32_t>;

namespace detail {

inline constexpr double kDivisionFloor = 1e-12;

// Branch-free float exp (Cephes range reduction + degree-6 polynomial, ~1 ulp)
// so hot loops vectorize; double keeps std::exp for finite-difference work.
inline float exp_kernel(float x) {
  x = x < -87.0f ? -87.0f : x;
  x = x > 88.0f ? 88.0f : x;
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline double exp_kernel(double x) { return std::exp(x); }

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA dfa, DB dfb) {
  const bool same = a.shape() == b.shape();
  if (!same && a.numel() != 1 && b.numel() != 1) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Shape& out_shape = (same || b.numel() == 1) ? a.shape() : b.shape();
  const std::size_t n = numel_of(out_shape);
  const std::size_t step_a = a.numel() == 1 && n != 1 ? 0 : 1;
  const std::size_t step_b = b.numel() == 1 && n != 1 ? 0 : 1;
  Tensor<T> out(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i * step_a], bv[i * step_b]);
  auto ai = a.impl();
  auto bi = b.impl();
  detail::record(
      out,
      [ai, bi, step_a, step_b, n, dfa, dfb](const std::vector<T>& g) {
        if (ai->requires_grad) {
          auto& ga = ai->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) ga[i * step_a] += g[i] * dfa(ai->data[i * step_a], bi->data[i * step_b]);
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) gb[i * step_b] += g[i] * dfb(ai->data[i * step_a], bi->data[i * step_b]);
        }
      },
      a, b);
  return out;
}

// `df(x, y)` is the derivative given input x and output y.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  auto ai = a.impl();
  auto oi = out.impl();
  std::weak_ptr<TensorImpl<T>> weak_out = oi;
  detail::record(
      out,
      [ai, weak_out, df](const std::vector<T>& g) {
        auto o = weak_out.lock();
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(ai->data[i], o->data[i]);
      },
      a);
  return out;
}

inline std::size_t inner_size(const Shape& shape, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < shape.size(); ++i) n *= shape[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; }, [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

/// Throws ValueError if any denominator is within 1e-12 of zero; callers that
/// may hit zero must add an epsilon or floor first.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data()) {
    if (!(std::abs(static_cast<double>(v)) >= detail::kDivisionFloor)) {
      throw ValueError("div: denominator magnitude below 1e-12 (" + std::to_string(static_cast<double>(v)) + ")");
    }
  }
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T{0})) throw ValueError("log: non-positive argument " + std::to_string(static_cast<double>(v)));
  }
  return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> pow2(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

/// max(a, floor); the gradient passes only where a >= floor.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return detail::unary_op(
      a, [floor](T x) { return x < floor ? floor : x; }, [floor](T x, T) { return x < floor ? T{0} : T{1}; });
}

/// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out(a.shape());
  std::vector<T> sig(n);
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    sig[i] = T{1} / (T{1} + detail::exp_kernel(-av[i]));
    ov[i] = av[i] * sig[i];
  }
  auto ai = a.impl();
  detail::record(
      out,
      [ai, sig = std::move(sig)](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        const auto& x = ai->data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sig[i] * (T{1} + x[i] * (T{1} - sig[i]));
      },
      a);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T c) {
  return detail::unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T c) {
  return detail::unary_op(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

/// c - a
template <typename T>
Tensor<T> rsub(T c, const Tensor<T>& a) {
  return detail::unary_op(a, [c](T x) { return c - x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T c) { return add(a, c); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T c) { return mul(a, c); }
template <typename T>
Tensor<T> operator*(T c, const Tensor<T>& a) { return mul(a, c); }
template <typename T>
Tensor<T> operator-(T c, const Tensor<T>& a) { return rsub(c, a); }

enum class ElementwiseOp { add, sub, mul, div, exp, log, neg, pow2 };

/// Enum-dispatched form of the elementwise family; unary ops ignore `b`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b = {}) {
  auto need_b = [&] {
    if (!b.defined()) throw ShapeError("binary elementwise op needs a second operand");
  };
  switch (op) {
    case ElementwiseOp::add: need_b(); return add(a, b);
    case ElementwiseOp::sub: need_b(); return sub(a, b);
    case ElementwiseOp::mul: need_b(); return mul(a, b);
    case ElementwiseOp::div: need_b(); return div(a, b);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::neg: return neg(a);
    case ElementwiseOp::pow2: return pow2(a);
  }
  throw ValueError("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  auto ai = a.impl();
  detail::record(
      out,
      [ai](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        for (auto& v : ga) v += g[0];
      },
      a);
  return out;
}

/// Sum along one axis; the axis is dropped from the result shape.
template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
  }
  const std::size_t outer = numel_of(Shape(a.shape().begin(), a.shape().begin() + static_cast<long>(axis)));
  const std::size_t extent = a.dim(axis);
  const std::size_t inner = detail::inner_size(a.shape(), axis + 1);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<T> out(out_shape);
  auto av = a.data();
  auto ov = out.data();
  std::vector<double> acc(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t e = 0; e < extent; ++e) {
      const T* row = av.data() + (o * extent + e) * inner;
      for (std::size_t i = 0; i < inner; ++i) acc[i] += static_cast<double>(row[i]);
    }
    for (std::size_t i = 0; i < inner; ++i) ov[o * inner + i] = static_cast<T>(acc[i]);
  }
  auto ai = a.impl();
  detail::record(
      out,
      [ai, outer, extent, inner](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) ga[(o * extent + e) * inner + i] += g[o * inner + i];
      },
      a);
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
  }
  return mul(sum(a, axis), T{1} / static_cast<T>(a.dim(axis)));
}

/// Sums over every axis except `axis`; [B,C,...] with axis=1 gives [C].
template <typename T>
Tensor<T> sum_except(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum_except: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
  }
  const std::size_t outer = numel_of(Shape(a.shape().begin(), a.shape().begin() + static_cast<long>(axis)));
  const std::size_t extent = a.dim(axis);
  const std::size_t inner = detail::inner_size(a.shape(), axis + 1);
  std::vector<double> acc(extent, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e) {
      const T* row = av.data() + (o * extent + e) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += static_cast<double>(row[i]);
      acc[e] += s;
    }
  Tensor<T> out(Shape{extent});
  for (std::size_t e = 0; e < extent; ++e) out[e] = static_cast<T>(acc[e]);
  auto ai = a.impl();
  detail::record(
      out,
      [ai, outer, extent, inner](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) ga[(o * extent + e) * inner + i] += g[e];
      },
      a);
  return out;
}

/// Index of the maximum along `axis` (ties resolve to the lowest index). Not differentiable.
template <typename T>
IndexTensor max_index(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("max_index: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
  }
  const std::size_t outer = numel_of(Shape(a.shape().begin(), a.shape().begin() + static_cast<long>(axis)));
  const std::size_t extent = a.dim(axis);
  const std::size_t inner = detail::inner_size(a.shape(), axis + 1);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  IndexTensor out(out_shape);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      T best_v = av[o * extent * inner + i];
      for (std::size_t e = 1; e < extent; ++e) {
        const T v = av[(o * extent + e) * inner + i];
        if (v > best_v) {
          best_v = v;
          best = e;
        }
      }
      out[o * inner + i] = static_cast<std::int32_t>(best);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Channel-structured operations on [B, C, spatial...] tensors

/// softmax(scale * a) along axis 1.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& a, T scale = T{1}) {
  if (a.rank() < 2) throw ShapeError("softmax_channels: need rank >= 2, got " + to_string(a.shape()));
  const std::size_t batch = a.dim(0);
  const std::size_t channels = a.dim(1);
  const std::size_t inner = detail::inner_size(a.shape(), 2);
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  std::vector<T> peak(inner);
  std::vector<T> total(inner);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = av.data() + b * channels * inner;
    T* dst = ov.data() + b * channels * inner;
    std::copy(src, src + inner, peak.begin());
    for (std::size_t c = 1; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) peak[i] = std::max(peak[i], src[c * inner + i]);
    std::fill(total.begin(), total.end(), T{0});
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const T e = detail::exp_kernel(scale * (src[c * inner + i] - peak[i]));
        dst[c * inner + i] = e;
        total[i] += e;
      }
    for (std::size_t i = 0; i < inner; ++i) total[i] = T{1} / total[i];
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) dst[c * inner + i] *= total[i];
  }
  auto ai = a.impl();
  std::weak_ptr<detail::TensorImpl<T>> weak_out = out.impl();
  detail::record(
      out,
      [ai, weak_out, batch, channels, inner, scale](const std::vector<T>& g) {
        auto o = weak_out.lock();
        const auto& y = o->data;
        auto& ga = ai->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * channels * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            double dot = 0.0;
            for (std::size_t c = 0; c < channels; ++c)
              dot += static_cast<double>(g[base + c * inner + i]) * static_cast<double>(y[base + c * inner + i]);
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t k = base + c * inner + i;
              ga[k] += scale * y[k] * (g[k] - static_cast<T>(dot));
            }
          }
        }
      },
      a);
  return out;
}

/// Output channel g is the sum of the input channels listed in groups[g].
/// A channel may appear in several groups (replication) or in none.
template <typename T>
Tensor<T> combine_channels(const Tensor<T>& a, const std::vector<std::vector<std::size_t>>& groups) {
  if (a.rank() < 2) throw ShapeError("combine_channels: need rank >= 2, got " + to_string(a.shape()));
  if (groups.empty()) throw ShapeError("combine_channels: no output channels requested");
  const std::size_t batch = a.dim(0);
  const std::size_t channels = a.dim(1);
  const std::size_t inner = detail::inner_size(a.shape(), 2);
  for (const auto& group : groups)
    for (auto c : group)
      if (c >= channels) {
        throw ShapeError("combine_channels: channel " + std::to_string(c) + " out of range for shape " +
                         to_string(a.shape()));
      }
  Shape out_shape = a.shape();
  out_shape[1] = groups.size();
  Tensor<T> out(out_shape);
  auto av = a.data();
  auto ov = out.data();
  const std::size_t out_channels = groups.size();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t g = 0; g < out_channels; ++g) {
      T* dst = ov.data() + (b * out_channels + g) * inner;
      for (auto c : groups[g]) {
        const T* src = av.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  auto ai = a.impl();
  detail::record(
      out,
      [ai, groups, batch, channels, inner, out_channels](const std::vector<T>& grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t g = 0; g < out_channels; ++g) {
            const T* src = grad.data() + (b * out_channels + g) * inner;
            for (auto c : groups[g]) {
              T* dst = ga.data() + (b * channels + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
          }
      },
      a);
  return out;
}

/// Zeroes every voxel where keep == 0, across all channels. Dropped voxels
/// contribute nothing to later sums and receive no gradient.
template <typename T>
Tensor<T> select_mask(const Tensor<T>& a, const Mask& keep) {
  if (a.rank() < 2) throw ShapeError("select_mask: need rank >= 2, got " + to_string(a.shape()));
  Shape spatial = a.shape();
  spatial.erase(spatial.begin() + 1);
  if (keep.shape() != spatial) {
    throw ShapeError("select_mask: mask shape " + to_string(keep.shape()) + " does not match " +
                     to_string(a.shape()) + " without its channel axis");
  }
  const std::size_t batch = a.dim(0);
  const std::size_t channels = a.dim(1);
  const std::size_t inner = detail::inner_size(a.shape(), 2);
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  auto kv = keep.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (b * channels + c) * inner + i;
        ov[k] = kv[b * inner + i] ? av[k] : T{0};
      }
  auto ai = a.impl();
  auto ki = keep.impl();
  detail::record(
      out,
      [ai, ki, batch, channels, inner](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = (b * channels + c) * inner + i;
              if (ki->data[b * inner + i]) ga[k] += g[k];
            }
      },
      a);
  return out;
}

/// Adds bias[c] to every element of channel c.
template <typename T>
Tensor<T> bias_add(const Tensor<T>& a, const Tensor<T>& bias) {
  if (a.rank() < 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
    throw ShapeError("bias_add: bias " + to_string(bias.shape()) + " incompatible with " + to_string(a.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t channels = a.dim(1);
  const std::size_t inner = detail::inner_size(a.shape(), 2);
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (b * channels + c) * inner + i;
        ov[k] = av[k] + bv[c];
      }
  auto ai = a.impl();
  auto bi = bias.impl();
  detail::record(
      out,
      [ai, bi, batch, channels, inner](const std::vector<T>& g) {
        if (ai->requires_grad) {
          auto& ga = ai->grad_buffer();
          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
              double s = 0.0;
              for (std::size_t i = 0; i < inner; ++i) s += static_cast<double>(g[(b * channels + c) * inner + i]);
              gb[c] += static_cast<T>(s);
            }
        }
      },
      a, bias);
  return out;
}

/// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("upsample2x: need [B,C,H,W], got " + to_string(a.shape()));
  const std::size_t planes = a.dim(0) * a.dim(1);
  const std::size_t h = a.dim(2);
  const std::size_t w = a.dim(3);
  Tensor<T> out(Shape{a.dim(0), a.dim(1), 2 * h, 2 * w});
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x) ov[(p * 2 * h + y) * 2 * w + x] = av[(p * h + y / 2) * w + x / 2];
  auto ai = a.impl();
  detail::record(
      out,
      [ai, planes, h, w](const std::vector<T>& g) {
        auto& ga = ai->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x) ga[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
      },
      a);
  return out;
}

/// Same values, no gradient path.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return a.detach();
}

}  // namespace condistfl
