#pragma once

#include <memory>
#include <mutex>
#include <variant>

#include "snf/conv.hpp"
#include "snf/linalg.hpp"
#include "snf/random.hpp"
#include "snf/tensor.hpp"

namespace snf {

// Layer functions accept either a single example (rank 1 for FC, [C, H, W]
// for convolutions) or a batch laid out as [N, D] with one flattened example
// per row, and return the same layout.

/// Self-normalizing fully connected layer: f(x) = W x, g(z) = R z.
struct FcLayer {
  Tensor weight;          ///< W, forward parameters
  Tensor inverse_weight;  ///< R, learned inverse parameters

  std::size_t dim() const { return weight.rows(); }

  /// W = orthogonalized I + XavierNormal(gain) noise, R = W^T = W^{-1}.
  static FcLayer initialized(std::size_t dim, Rng& rng, double gain = 0.01);
};

/// Exact-inverse LU for a convolution, reused while kernel and geometry are unchanged.
struct ConvLuCache {
  std::mutex mutex;
  ImageShape shape;
  Tensor kernel_snapshot;
  std::shared_ptr<const LuFactorization> lu;
};

/// Self-normalizing convolutional layer: f(x) = w (star) x, g(z) = r (star) z.
/// Channel counts are square so that the layer is a D x D map.
struct ConvLayer {
  Tensor kernel;            ///< w, [C, C, kH, kW]
  Tensor inverse_kernel;    ///< r, [C, C, kH', kW'] with kH' >= kH
  ImageShape shape;         ///< bound input geometry
  Tensor multiple;          ///< m for w at the bound geometry
  Tensor inverse_multiple;  ///< m for r at the bound geometry

  Padding pad() const { return same_padding(kernel); }
  Padding inverse_pad() const { return same_padding(inverse_kernel); }
  std::size_t channels() const { return kernel.dim(0); }

  /// Binds an input geometry; multiples are recomputed whenever it changes.
  void bind(ImageShape in);

  /// w = dirac + XavierNormal(gain) noise; r = flip(w), zero-padded to the inverse size.
  static ConvLayer initialized(ImageShape in, std::size_t kernel_size, std::size_t inverse_kernel_size, Rng& rng,
                               double gain = 0.01);

  std::shared_ptr<ConvLuCache> lu_cache = std::make_shared<ConvLuCache>();
};

/// sigma(x) = alpha x + (1 - alpha) softplus(x).
struct SmoothLeakyRelu {
  double alpha = 0.3;
};

/// Moves factor x factor spatial blocks into channels: [C, H, W] -> [f^2 C, H/f, W/f].
struct Squeeze {
  std::size_t factor = 2;
};

using Layer = std::variant<FcLayer, ConvLayer, SmoothLeakyRelu, Squeeze>;

// Fully connected.
Tensor fc_forward(const FcLayer& layer, const Tensor& x);
Tensor fc_inverse_learned(const FcLayer& layer, const Tensor& z);
/// Solves W x = z by LU. Throws SingularMatrix.
Tensor fc_inverse_exact(const FcLayer& layer, const Tensor& z);

// Convolution kernels.

/// flip(k)[o, i, h, w] = k[i, o, H-1-h, W-1-w]; satisfies T(flip(k)) = T(k)^T for square channels.
Tensor flip_kernel(const Tensor& kernel);
/// Number of times each kernel tap occurs in the convolution matrix: ones(z) (star) ones(x).
Tensor compute_multiple_m(ImageShape out, ImageShape in, const Shape& kernel_shape, Padding pad);

Tensor conv_forward(const ConvLayer& layer, const Tensor& x);
Tensor conv_inverse_learned(const ConvLayer& layer, const Tensor& z);
/// Solves T(w) x = z through a cached LU of the materialized convolution matrix.
Tensor conv_inverse_exact(const ConvLayer& layer, const Tensor& z);
/// LU of T(w) at the bound geometry, shared with conv_inverse_exact's cache.
std::shared_ptr<const LuFactorization> conv_forward_lu(const ConvLayer& layer);

// Smooth leaky ReLU.
double softplus(double x);
double slrelu_value(double alpha, double x);
double slrelu_derivative(double alpha, double x);
/// d/dx log sigma'(x).
double slrelu_log_derivative_grad(double alpha, double x);
/// Inverts sigma for one value: safeguarded Newton with bisection fallback.
double slrelu_invert_value(double alpha, double y);

struct SlreluOutput {
  Tensor y;
  double logdet = 0.0;  ///< sum over every element of log sigma'(x)
};
SlreluOutput slrelu_forward(const SmoothLeakyRelu& act, const Tensor& x);
/// Per-row log-determinants for a [N, D] batch.
Tensor slrelu_row_logdets(const SmoothLeakyRelu& act, const Tensor& x);
Tensor slrelu_inverse(const SmoothLeakyRelu& act, const Tensor& y);

// Squeeze. Single images are [C, H, W]; batches are [N, D] with an explicit geometry.
Tensor squeeze_forward(const Tensor& x, std::size_t factor = 2);
Tensor squeeze_inverse(const Tensor& y, std::size_t factor = 2);
Tensor squeeze_forward(const Tensor& batch, ImageShape in, std::size_t factor);
Tensor squeeze_inverse(const Tensor& batch, ImageShape in, std::size_t factor);
ImageShape squeeze_shape(ImageShape in, std::size_t factor);

}  // namespace snf
