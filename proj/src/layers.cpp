#include "snf/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "snf/gradients.hpp"

namespace snf {
namespace {

// Applies a per-example function to a single example or to every row of a batch.
template <typename Fn>
Tensor map_rows(const Tensor& x, std::size_t example_size, const Shape& single_shape, Fn&& fn) {
  if (x.rank() == 2 && x.cols() == example_size && single_shape.size() != 2) {
    Tensor out({x.rows(), example_size});
    for (std::size_t n = 0; n < x.rows(); ++n) fn(x.row(n), out.row(n));
    return out;
  }
  if (x.shape() != single_shape) {
    throw ShapeError("expected " + shape_string(single_shape) + " or a [N, " + std::to_string(example_size) +
                     "] batch, got " + shape_string(x.shape()));
  }
  Tensor out(single_shape);
  fn(x.data(), out.data());
  return out;
}

void require_square_channels(const Tensor& k, const char* what) {
  if (k.rank() != 4 || k.dim(0) != k.dim(1)) {
    throw ShapeError(std::string(what) + ": kernel must be [C, C, kH, kW], got " + shape_string(k.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------- FC

FcLayer FcLayer::initialized(std::size_t dim, Rng& rng, double gain) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(2 * dim));
  Tensor w = rng.normal_tensor({dim, dim}, stddev);
  for (std::size_t i = 0; i < dim; ++i) w(i, i) += 1.0;
  // Orthogonalize the columns (Gram-Schmidt, two passes) so that R = W^T is
  // also W^{-1} to round-off. The result stays within O(gain) of I + noise.
  for (std::size_t j = 0; j < dim; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        double d = 0.0;
        for (std::size_t r = 0; r < dim; ++r) d += w(r, i) * w(r, j);
        for (std::size_t r = 0; r < dim; ++r) w(r, j) -= d * w(r, i);
      }
    }
    double n = 0.0;
    for (std::size_t r = 0; r < dim; ++r) n += w(r, j) * w(r, j);
    n = std::sqrt(n);
    for (std::size_t r = 0; r < dim; ++r) w(r, j) /= n;
  }
  return FcLayer{w, transpose(w)};
}

Tensor fc_forward(const FcLayer& layer, const Tensor& x) {
  if (x.rank() == 1) {
    return Tensor({layer.dim()}, matvec(layer.weight, x.data()));
  }
  return matmul_nt(x, layer.weight);
}

Tensor fc_inverse_learned(const FcLayer& layer, const Tensor& z) {
  if (z.rank() == 1) {
    return Tensor({layer.dim()}, matvec(layer.inverse_weight, z.data()));
  }
  return matmul_nt(z, layer.inverse_weight);
}

Tensor fc_inverse_exact(const FcLayer& layer, const Tensor& z) {
  const LuFactorization lu = lu_factor(layer.weight);
  if (z.rank() == 1) return solve(lu, z);
  // Rows are examples: X^T = W^{-1} Z^T.
  return transpose(solve(lu, transpose(z)));
}

// ---------------------------------------------------------------- conv

Tensor flip_kernel(const Tensor& k) {
  if (k.rank() != 4) throw ShapeError("flip_kernel: expected a rank-4 kernel, got " + shape_string(k.shape()));
  const std::size_t O = k.dim(0), I = k.dim(1), H = k.dim(2), W = k.dim(3);
  Tensor f({I, O, H, W});
  for (std::size_t o = 0; o < I; ++o)
    for (std::size_t i = 0; i < O; ++i)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) f(o, i, h, w) = k(i, o, H - 1 - h, W - 1 - w);
  return f;
}

Tensor compute_multiple_m(ImageShape out, ImageShape in, const Shape& kernel_shape, Padding pad) {
  if (conv_output_shape(in, kernel_shape, pad) != out) {
    throw ShapeError("compute_multiple_m: output geometry does not match the convolution");
  }
  const std::vector<double> ones_out(out.size(), 1.0), ones_in(in.size(), 1.0);
  Tensor m(kernel_shape);
  accumulate_kernel_grad(ones_out, out, ones_in, in, pad, m);
  return m;
}

void ConvLayer::bind(ImageShape in) {
  require_square_channels(kernel, "ConvLayer");
  require_square_channels(inverse_kernel, "ConvLayer");
  if (in.channels != kernel.dim(0) || inverse_kernel.dim(0) != kernel.dim(0)) {
    throw ShapeError("ConvLayer: channel count does not match input geometry");
  }
  if (inverse_kernel.dim(2) < kernel.dim(2) || inverse_kernel.dim(3) < kernel.dim(3)) {
    throw ShapeError("ConvLayer: inverse kernel must be at least as large as the forward kernel");
  }
  if (in == shape && !multiple.empty()) return;
  shape = in;
  multiple = compute_multiple_m(in, in, kernel.shape(), pad());
  inverse_multiple = compute_multiple_m(in, in, inverse_kernel.shape(), inverse_pad());
}

ConvLayer ConvLayer::initialized(ImageShape in, std::size_t kernel_size, std::size_t inverse_kernel_size, Rng& rng,
                                 double gain) {
  const std::size_t c = in.channels;
  const double fan = static_cast<double>(c * kernel_size * kernel_size);
  const double stddev = gain * std::sqrt(2.0 / (2.0 * fan));
  Tensor w = rng.normal_tensor({c, c, kernel_size, kernel_size}, stddev);
  const std::size_t mid = kernel_size / 2;
  for (std::size_t i = 0; i < c; ++i) w(i, i, mid, mid) += 1.0;

  ConvLayer layer;
  layer.kernel = w;
  layer.inverse_kernel = pad_kernel_center(flip_kernel(w), inverse_kernel_size, inverse_kernel_size);
  layer.bind(in);
  return layer;
}

Tensor conv_forward(const ConvLayer& layer, const Tensor& x) {
  const ImageShape s = layer.shape;
  const Padding pad = layer.pad();
  return map_rows(x, s.size(), s.as_shape(), [&](std::span<const double> in, std::span<double> out) {
    conv2d_into(in, s, layer.kernel, pad, out);
  });
}

Tensor conv_inverse_learned(const ConvLayer& layer, const Tensor& z) {
  const ImageShape s = layer.shape;
  const Padding pad = layer.inverse_pad();
  return map_rows(z, s.size(), s.as_shape(), [&](std::span<const double> in, std::span<double> out) {
    conv2d_into(in, s, layer.inverse_kernel, pad, out);
  });
}

std::shared_ptr<const LuFactorization> conv_forward_lu(const ConvLayer& layer) {
  ConvLuCache& cache = *layer.lu_cache;
  std::lock_guard lock(cache.mutex);
  if (!cache.lu || cache.shape != layer.shape || !(cache.kernel_snapshot == layer.kernel)) {
    const Tensor t = build_conv_matrix(layer.kernel, layer.shape, layer.pad());
    cache.lu = std::make_shared<const LuFactorization>(lu_factor(t));
    cache.shape = layer.shape;
    cache.kernel_snapshot = layer.kernel;
  }
  return cache.lu;
}

Tensor conv_inverse_exact(const ConvLayer& layer, const Tensor& z) {
  const auto lu = conv_forward_lu(layer);
  const ImageShape s = layer.shape;
  return map_rows(z, s.size(), s.as_shape(), [&](std::span<const double> in, std::span<double> out) {
    const Tensor x = solve(*lu, Tensor({in.size()}, std::vector<double>(in.begin(), in.end())));
    std::copy(x.data().begin(), x.data().end(), out.begin());
  });
}

// ---------------------------------------------------------------- smooth leaky ReLU

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

namespace {
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

double slrelu_value(double alpha, double x) { return alpha * x + (1.0 - alpha) * softplus(x); }

double slrelu_derivative(double alpha, double x) { return alpha + (1.0 - alpha) * sigmoid(x); }

double slrelu_log_derivative_grad(double alpha, double x) {
  const double s = sigmoid(x);
  return (1.0 - alpha) * s * (1.0 - s) / slrelu_derivative(alpha, x);
}

double slrelu_invert_value(double alpha, double y) {
  if (!std::isfinite(y)) throw NoConvergence("slrelu inverse of a non-finite value");
  if (alpha == 1.0) return y;
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("smooth leaky ReLU slope must lie in (0, 1]");

  auto residual = [&](double x) { return slrelu_value(alpha, x) - y; };
  double lo = std::min(y, y / alpha) - 1.0;
  double hi = std::max(y, y / alpha) + 1.0;
  // The bracket is widened until it straddles the root; sigma is strictly increasing.
  for (int i = 0; residual(lo) > 0.0 && i < 64; ++i) lo -= (hi - lo);
  for (int i = 0; residual(hi) < 0.0 && i < 64; ++i) hi += (hi - lo);

  const double tol = std::max(1e-10, 8.0 * std::numeric_limits<double>::epsilon() * std::abs(y));
  double x = y < 0.0 ? y / alpha : y;
  if (x <= lo || x >= hi) x = 0.5 * (lo + hi);
  for (int iter = 0; iter < 100; ++iter) {
    const double r = residual(x);
    if (std::abs(r) <= tol) return x;
    if (r > 0.0)
      hi = x;
    else
      lo = x;
    double next = x - r / slrelu_derivative(alpha, x);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == x) break;
    x = next;
  }
  if (std::abs(residual(x)) <= tol) return x;
  throw NoConvergence("slrelu inverse did not converge for y = " + std::to_string(y));
}

SlreluOutput slrelu_forward(const SmoothLeakyRelu& act, const Tensor& x) {
  SlreluOutput out{Tensor(x.shape()), 0.0};
  auto in = x.data();
  auto y = out.y.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    y[i] = slrelu_value(act.alpha, in[i]);
    out.logdet += std::log(slrelu_derivative(act.alpha, in[i]));
  }
  return out;
}

Tensor slrelu_row_logdets(const SmoothLeakyRelu& act, const Tensor& x) {
  Tensor ld({x.rows()});
  for (std::size_t n = 0; n < x.rows(); ++n) {
    double s = 0.0;
    for (double v : x.row(n)) s += std::log(slrelu_derivative(act.alpha, v));
    ld[n] = s;
  }
  return ld;
}

Tensor slrelu_inverse(const SmoothLeakyRelu& act, const Tensor& y) {
  Tensor x(y.shape());
  auto in = y.data();
  auto out = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = slrelu_invert_value(act.alpha, in[i]);
  return x;
}

// ---------------------------------------------------------------- squeeze

ImageShape squeeze_shape(ImageShape in, std::size_t f) {
  if (f == 0 || in.height % f != 0 || in.width % f != 0) {
    throw ShapeError("squeeze: spatial extents " + std::to_string(in.height) + "x" + std::to_string(in.width) +
                     " are not divisible by " + std::to_string(f));
  }
  return {in.channels * f * f, in.height / f, in.width / f};
}

namespace {

// out[c f^2 + dy f + dx, y, x] = in[c, y f + dy, x f + dx]
void squeeze_one(std::span<const double> in, ImageShape s, std::size_t f, std::span<double> out, bool inverse) {
  const ImageShape o = squeeze_shape(s, f);
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t dy = 0; dy < f; ++dy)
      for (std::size_t dx = 0; dx < f; ++dx) {
        const std::size_t oc = c * f * f + dy * f + dx;
        for (std::size_t y = 0; y < o.height; ++y)
          for (std::size_t x = 0; x < o.width; ++x) {
            const std::size_t src = (c * s.height + y * f + dy) * s.width + x * f + dx;
            const std::size_t dst = (oc * o.height + y) * o.width + x;
            if (inverse)
              out[src] = in[dst];
            else
              out[dst] = in[src];
          }
      }
}

}  // namespace

Tensor squeeze_forward(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3) throw ShapeError("squeeze_forward: expected [C, H, W], got " + shape_string(x.shape()));
  const ImageShape s{x.dim(0), x.dim(1), x.dim(2)};
  Tensor out(squeeze_shape(s, factor).as_shape());
  squeeze_one(x.data(), s, factor, out.data(), false);
  return out;
}

Tensor squeeze_inverse(const Tensor& y, std::size_t factor) {
  if (y.rank() != 3 || y.dim(0) % (factor * factor) != 0) {
    throw ShapeError("squeeze_inverse: expected [f^2 C, H, W], got " + shape_string(y.shape()));
  }
  const ImageShape s{y.dim(0) / (factor * factor), y.dim(1) * factor, y.dim(2) * factor};
  Tensor out(s.as_shape());
  squeeze_one(y.data(), s, factor, out.data(), true);
  return out;
}

Tensor squeeze_forward(const Tensor& batch, ImageShape in, std::size_t factor) {
  Tensor out({batch.rows(), in.size()});
  for (std::size_t n = 0; n < batch.rows(); ++n) squeeze_one(batch.row(n), in, factor, out.row(n), false);
  return out;
}

Tensor squeeze_inverse(const Tensor& batch, ImageShape in, std::size_t factor) {
  Tensor out({batch.rows(), in.size()});
  for (std::size_t n = 0; n < batch.rows(); ++n) squeeze_one(batch.row(n), in, factor, out.row(n), true);
  return out;
}

}  // namespace snf
