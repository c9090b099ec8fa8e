#include "snf/conv.hpp"

#include <algorithm>
#include <cstdint>

namespace snf {
namespace {

using Index = std::ptrdiff_t;

void require_kernel(const Shape& k) {
  if (k.size() != 4) throw ShapeError("convolution kernel must be rank 4, got " + shape_string(k));
}

// Range of output coordinates y for which y + offset lands inside [0, extent_in).
struct Span1d {
  Index begin;
  Index end;
};

Span1d valid_range(Index offset, Index extent_in, Index extent_out) {
  const Index b = std::max<Index>(0, -offset);
  const Index e = std::min<Index>(extent_out, extent_in - offset);
  return {b, std::max(b, e)};
}

}  // namespace

Padding same_padding(std::size_t kernel_h, std::size_t kernel_w) {
  if (kernel_h % 2 == 0 || kernel_w % 2 == 0) {
    throw ShapeError("even kernel extents are not supported (" + std::to_string(kernel_h) + "x" +
                     std::to_string(kernel_w) + ")");
  }
  return {(kernel_h - 1) / 2, (kernel_w - 1) / 2};
}

Padding same_padding(const Tensor& kernel) {
  require_kernel(kernel.shape());
  return same_padding(kernel.dim(2), kernel.dim(3));
}

ImageShape conv_output_shape(ImageShape in, const Shape& k, Padding pad) {
  require_kernel(k);
  if (k[2] % 2 == 0 || k[3] % 2 == 0) throw ShapeError("even kernel extents are not supported");
  if (k[1] != in.channels) {
    throw ShapeError("kernel expects " + std::to_string(k[1]) + " input channels, image has " +
                     std::to_string(in.channels));
  }
  const Index h = static_cast<Index>(in.height + 2 * pad.rows) - static_cast<Index>(k[2]) + 1;
  const Index w = static_cast<Index>(in.width + 2 * pad.cols) - static_cast<Index>(k[3]) + 1;
  if (h <= 0 || w <= 0) throw ShapeError("kernel larger than padded input");
  return {k[0], static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
}

void conv2d_into(std::span<const double> input, ImageShape in, const Tensor& kernel, Padding pad,
                 std::span<double> out) {
  const auto& ks = kernel.shape();
  const ImageShape os = conv_output_shape(in, ks, pad);
  if (input.size() != in.size() || out.size() != os.size()) throw ShapeError("conv2d_into: buffer size mismatch");

  const Index kh = static_cast<Index>(ks[2]), kw = static_cast<Index>(ks[3]);
  const Index H = static_cast<Index>(in.height), W = static_cast<Index>(in.width);
  const Index Ho = static_cast<Index>(os.height), Wo = static_cast<Index>(os.width);
  const Index ph = static_cast<Index>(pad.rows), pw = static_cast<Index>(pad.cols);

  std::fill(out.begin(), out.end(), 0.0);
  const double* k = kernel.data().data();
  for (std::size_t o = 0; o < os.channels; ++o) {
    double* oplane = out.data() + o * os.height * os.width;
    for (std::size_t i = 0; i < in.channels; ++i) {
      const double* iplane = input.data() + i * in.height * in.width;
      for (Index a = 0; a < kh; ++a) {
        const Span1d ys = valid_range(a - ph, H, Ho);
        for (Index b = 0; b < kw; ++b) {
          const double w = k[((o * ks[1] + i) * ks[2] + a) * ks[3] + b];
          const Span1d xs = valid_range(b - pw, W, Wo);
          for (Index y = ys.begin; y < ys.end; ++y) {
            double* orow = oplane + y * Wo;
            const double* irow = iplane + (y + a - ph) * W;
            for (Index x = xs.begin; x < xs.end; ++x) orow[x] += w * irow[x + b - pw];
          }
        }
      }
    }
  }
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Padding pad) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C, H, W], got " + shape_string(input.shape()));
  const ImageShape in{input.dim(0), input.dim(1), input.dim(2)};
  const ImageShape os = conv_output_shape(in, kernel.shape(), pad);
  Tensor out(os.as_shape());
  conv2d_into(input.data(), in, kernel, pad, out.data());
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel) { return conv2d(input, kernel, same_padding(kernel)); }

void accumulate_kernel_grad(std::span<const double> delta, ImageShape out, std::span<const double> input,
                            ImageShape in, Padding pad, Tensor& grad) {
  const auto& ks = grad.shape();
  require_kernel(ks);
  if (ks[0] != out.channels || ks[1] != in.channels) throw ShapeError("kernel_grad: channel mismatch");
  if (delta.size() != out.size() || input.size() != in.size()) throw ShapeError("kernel_grad: buffer mismatch");

  const Index kh = static_cast<Index>(ks[2]), kw = static_cast<Index>(ks[3]);
  const Index H = static_cast<Index>(in.height), W = static_cast<Index>(in.width);
  const Index Ho = static_cast<Index>(out.height), Wo = static_cast<Index>(out.width);
  const Index ph = static_cast<Index>(pad.rows), pw = static_cast<Index>(pad.cols);

  double* g = grad.data().data();
  for (std::size_t o = 0; o < out.channels; ++o) {
    const double* dplane = delta.data() + o * out.height * out.width;
    for (std::size_t i = 0; i < in.channels; ++i) {
      const double* iplane = input.data() + i * in.height * in.width;
      for (Index a = 0; a < kh; ++a) {
        const Span1d ys = valid_range(a - ph, H, Ho);
        for (Index b = 0; b < kw; ++b) {
          const Span1d xs = valid_range(b - pw, W, Wo);
          double s = 0.0;
          for (Index y = ys.begin; y < ys.end; ++y) {
            const double* drow = dplane + y * Wo;
            const double* irow = iplane + (y + a - ph) * W;
            for (Index x = xs.begin; x < xs.end; ++x) s += drow[x] * irow[x + b - pw];
          }
          g[((o * ks[1] + i) * ks[2] + a) * ks[3] + b] += s;
        }
      }
    }
  }
}

Tensor kernel_grad(const Tensor& delta, const Tensor& input, const Shape& kernel_shape, Padding pad) {
  if (delta.rank() != 3 || input.rank() != 3) throw ShapeError("kernel_grad: expected [C, H, W] tensors");
  const ImageShape in{input.dim(0), input.dim(1), input.dim(2)};
  const ImageShape out{delta.dim(0), delta.dim(1), delta.dim(2)};
  if (conv_output_shape(in, kernel_shape, pad) != out) throw ShapeError("kernel_grad: delta has wrong geometry");
  Tensor grad(kernel_shape);
  accumulate_kernel_grad(delta.data(), out, input.data(), in, pad, grad);
  return grad;
}

Tensor build_conv_matrix(const Tensor& kernel, ImageShape in, Padding pad, std::size_t size_guard) {
  const ImageShape os = conv_output_shape(in, kernel.shape(), pad);
  const std::size_t n_in = in.size(), n_out = os.size();
  if (n_in > size_guard || n_out > size_guard) {
    throw SizeGuardExceeded("conv matrix of " + std::to_string(n_out) + "x" + std::to_string(n_in) +
                            " exceeds size guard " + std::to_string(size_guard));
  }
  Tensor m({n_out, n_in});
  std::vector<double> basis(n_in, 0.0), column(n_out);
  for (std::size_t j = 0; j < n_in; ++j) {
    basis[j] = 1.0;
    conv2d_into(basis, in, kernel, pad, column);
    basis[j] = 0.0;
    for (std::size_t r = 0; r < n_out; ++r) m(r, j) = column[r];
  }
  return m;
}

}  // namespace snf
