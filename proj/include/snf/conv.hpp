#pragma once

#include <span>

#include "snf/tensor.hpp"

namespace snf {

/// Channel-major image geometry (C, H, W).
struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const noexcept { return channels * height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct Padding {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const Padding&, const Padding&) = default;
};

/// (k - 1) / 2 on each axis. Rejects even kernel extents.
Padding same_padding(const Tensor& kernel);
Padding same_padding(std::size_t kernel_h, std::size_t kernel_w);

/// Output geometry of a stride-1 convolution.
ImageShape conv_output_shape(ImageShape in, const Shape& kernel_shape, Padding pad);

// Convolutions use the cross-correlation convention of deep-learning frameworks:
//
//   out[o, y, x] = sum_{i, a, b} k[o, i, a, b] * in[i, y + a - pad_h, x + b - pad_w]
//
// with zero padding outside the input. Kernels are [C_out, C_in, kH, kW].

/// Writes the convolution of one flat image into `out` (overwritten).
void conv2d_into(std::span<const double> input, ImageShape in, const Tensor& kernel, Padding pad,
                 std::span<double> out);

/// input [C_in, H, W] -> [C_out, H', W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, Padding pad);
/// Same-padding convolution.
Tensor conv2d(const Tensor& input, const Tensor& kernel);

/// Kernel gradient of a convolution: grad[o,i,a,b] += sum_{y,x} delta[o,y,x] * in[i, y+a-ph, x+b-pw].
/// This is the "delta (star) input" correlation used by backpropagation.
void accumulate_kernel_grad(std::span<const double> delta, ImageShape out, std::span<const double> input,
                            ImageShape in, Padding pad, Tensor& grad);

Tensor kernel_grad(const Tensor& delta, const Tensor& input, const Shape& kernel_shape, Padding pad);

/// Largest total dimension build_conv_matrix will materialize by default.
inline constexpr std::size_t kConvMatrixGuard = 4096;

/// Explicit matrix M with M * vec(x) == vec(conv2d(x)), built by probing basis vectors.
/// Intended as an oracle and for the exact baselines, not as a fast path.
Tensor build_conv_matrix(const Tensor& kernel, ImageShape in, Padding pad,
                         std::size_t size_guard = kConvMatrixGuard);

}  // namespace snf
