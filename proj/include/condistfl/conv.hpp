#pragma once

#include <memory>
#include <string>
#include <vector>

#include "condistfl/gemm.hpp"
#include "condistfl/tensor.hpp"

namespace condistfl {

enum class Padding { same, valid };

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, pad_h, pad_w;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_plane() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
        const T* src = image + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_h);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T{0} : line[ix];
          }
        }
      }
}

template <typename T>
void col2im_accumulate(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
        T* dst = image + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_w);
            if (ix >= 0 && ix < static_cast<long>(g.width)) line[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2D cross-correlation of input [B,Cin,H,W] with kernel [Cout,Cin,kh,kw].
/// `same` pads by kh/2 (kw/2), so the output extent is ceil(H / stride).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 Padding padding = Padding::same) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(input.shape()) + " incompatible with kernel " +
                     to_string(kernel.shape()));
  }
  if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " + to_string(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = kernel.dim(0);
  g.kernel_h = kernel.dim(2);
  g.kernel_w = kernel.dim(3);
  g.stride = stride;
  g.pad_h = padding == Padding::same ? g.kernel_h / 2 : 0;
  g.pad_w = padding == Padding::same ? g.kernel_w / 2 : 0;
  const long span_h = static_cast<long>(g.height + 2 * g.pad_h) - static_cast<long>(g.kernel_h);
  const long span_w = static_cast<long>(g.width + 2 * g.pad_w) - static_cast<long>(g.kernel_w);
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: non-positive output extent for input " + to_string(input.shape()) + " and kernel " +
                     to_string(kernel.shape()));
  }
  g.out_h = static_cast<std::size_t>(span_h) / stride + 1;
  g.out_w = static_cast<std::size_t>(span_w) / stride + 1;

  Tensor<T> out(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  const T* in = input.data().data();
  const T* k = kernel.data().data();
  T* o = out.data().data();
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.out_plane();
  const std::size_t col_stride = g.patch() * g.out_plane();
  const bool pointwise = g.kernel_h == 1 && g.kernel_w == 1 && stride == 1;
  const bool recording = detail::active_tape<T> != nullptr && (input.requires_grad() || kernel.requires_grad());
  // The patch matrices are kept for the kernel gradient when recording.
  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : (recording ? g.batch : 1) * col_stride);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* patches = in + b * in_stride;
    if (!pointwise) {
      T* col = cols->data() + (recording ? b * col_stride : 0);
      detail::im2col(in + b * in_stride, g, col);
      patches = col;
    }
    detail::gemm(false, false, g.out_channels, g.out_plane(), g.patch(), T{1}, k, g.patch(), patches, g.out_plane(),
                 T{0}, o + b * out_stride, g.out_plane());
  }
  if (!recording) return out;

  auto ii = input.impl();
  auto ki = kernel.impl();
  detail::record(
      out,
      [ii, ki, g, in_stride, out_stride, col_stride, pointwise, cols](const std::vector<T>& grad) {
        std::vector<T> dcol(pointwise || !ii->requires_grad ? 0 : col_stride);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* go = grad.data() + b * out_stride;
          if (ki->requires_grad) {
            const T* patches = pointwise ? ii->data.data() + b * in_stride : cols->data() + b * col_stride;
            detail::gemm(false, true, g.out_channels, g.patch(), g.out_plane(), T{1}, go, g.out_plane(), patches,
                         g.out_plane(), T{1}, ki->grad_buffer().data(), g.patch());
          }
          if (ii->requires_grad) {
            T* gi = ii->grad_buffer().data() + b * in_stride;
            if (pointwise) {
              detail::gemm(true, false, g.patch(), g.out_plane(), g.out_channels, T{1}, ki->data.data(), g.patch(),
                           go, g.out_plane(), T{1}, gi, g.out_plane());
            } else {
              detail::gemm(true, false, g.patch(), g.out_plane(), g.out_channels, T{1}, ki->data.data(), g.patch(),
                           go, g.out_plane(), T{0}, dcol.data(), g.out_plane());
              detail::col2im_accumulate(dcol.data(), g, gi);
            }
          }
        }
      },
      input, kernel);
  return out;
}

}  // namespace condistfl
