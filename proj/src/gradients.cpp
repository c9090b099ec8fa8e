#include "snf/gradients.hpp"

#include <map>
#include <mutex>
#include <tuple>

namespace snf {

const char* to_string(GradMode mode) { return mode == GradMode::exact ? "exact" : "snf"; }

GradMode parse_grad_mode(const std::string& text) {
  if (text == "exact") return GradMode::exact;
  if (text == "snf") return GradMode::snf;
  throw ConfigError("unknown gradient mode '" + text + "' (expected exact or snf)");
}

Tensor ParamGrad::total(double lambda, double jvp_weight) const {
  Tensor t = 0.5 * loglik;
  t += 0.5 * logdet;
  t -= lambda * recon;
  if (jvp_weight != 0.0 && !jvp.empty()) t -= jvp_weight * jvp;
  return t;
}

std::vector<Tensor> GradReport::totals() const {
  std::vector<Tensor> out;
  out.reserve(2 * layers.size());
  for (const auto& l : layers) {
    out.push_back(l.forward.total(lambda, jvp_weight));
    out.push_back(l.inverse.total(lambda, jvp_weight));
  }
  return out;
}

std::vector<double> GradReport::layer_flat(std::size_t i, bool forward_only) const {
  const auto& l = layers.at(i);
  const Tensor f = l.forward.total(lambda, jvp_weight);
  std::vector<double> v(f.data().begin(), f.data().end());
  if (!forward_only) {
    const Tensor r = l.inverse.total(lambda, jvp_weight);
    v.insert(v.end(), r.data().begin(), r.data().end());
  }
  return v;
}

std::vector<double> GradReport::flat(bool forward_only) const {
  std::vector<double> v;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto l = layer_flat(i, forward_only);
    v.insert(v.end(), l.begin(), l.end());
  }
  return v;
}

namespace {

Tensor as_batch(const Tensor& h) {
  if (h.rank() == 1) return h.reshaped({1, h.size()});
  return h;
}

double inv_count(const Tensor& batch) { return 1.0 / static_cast<double>(batch.rows()); }

// Sum over rows of kernel_grad(delta_n, input_n), divided by the batch size.
Tensor batch_kernel_grad(const Tensor& delta, const Tensor& input, const Shape& kernel_shape, ImageShape geom,
                         Padding pad) {
  Tensor g(kernel_shape);
  for (std::size_t n = 0; n < delta.rows(); ++n) {
    accumulate_kernel_grad(delta.row(n), geom, input.row(n), geom, pad, g);
  }
  g *= inv_count(delta);
  return g;
}

Tensor conv_rows(const Tensor& batch, const Tensor& kernel, ImageShape geom) {
  const Padding pad = same_padding(kernel);
  Tensor out({batch.rows(), geom.size()});
  for (std::size_t n = 0; n < batch.rows(); ++n) conv2d_into(batch.row(n), geom, kernel, pad, out.row(n));
  return out;
}

ReconGrads fc_penalty(const FcLayer& layer, const Tensor& rows) {
  const Tensor h = as_batch(rows);
  const Tensor z = matmul_nt(h, layer.weight);
  Tensor e = matmul_nt(z, layer.inverse_weight);
  e -= h;
  ReconGrads r;
  for (double v : e.data()) r.loss += v * v;
  r.loss *= inv_count(h);
  // Row form: dW = 2 (E R)^T H / N, dR = 2 E^T Z / N.
  r.forward = matmul_tn(matmul(e, layer.inverse_weight), h);
  r.forward *= 2.0 * inv_count(h);
  r.inverse = matmul_tn(e, z);
  r.inverse *= 2.0 * inv_count(h);
  return r;
}

ReconGrads conv_penalty(const ConvLayer& layer, const Tensor& rows) {
  const Tensor h = as_batch(rows);
  const ImageShape s = layer.shape;
  const Tensor z = conv_rows(h, layer.kernel, s);
  Tensor e = conv_rows(z, layer.inverse_kernel, s);
  e -= h;
  ReconGrads r;
  for (double v : e.data()) r.loss += v * v;
  r.loss *= inv_count(h);
  // T(r)^T e = flip(r) (star) e.
  const Tensor back = conv_rows(e, flip_kernel(layer.inverse_kernel), s);
  r.forward = batch_kernel_grad(back, h, layer.kernel.shape(), s, layer.pad());
  r.forward *= 2.0;
  r.inverse = batch_kernel_grad(e, z, layer.inverse_kernel.shape(), s, layer.inverse_pad());
  r.inverse *= 2.0;
  return r;
}

// Flat indices into a (rows x cols) conv matrix for every tap, in CSR layout.
struct TapIndex {
  std::vector<std::size_t> offsets;  // size taps + 1
  std::vector<std::size_t> entries;
};

using TapKey = std::tuple<Shape, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>;

const TapIndex& tap_index(const Shape& ks, ImageShape in, Padding pad) {
  static std::mutex mutex;
  static std::map<TapKey, TapIndex> cache;
  const TapKey key{ks, in.channels, in.height, in.width, pad.rows, pad.cols};
  std::lock_guard lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  const ImageShape out = conv_output_shape(in, ks, pad);
  const std::size_t n_cols = in.size();
  TapIndex idx;
  idx.offsets.push_back(0);
  using Index = std::ptrdiff_t;
  for (std::size_t o = 0; o < ks[0]; ++o)
    for (std::size_t i = 0; i < ks[1]; ++i)
      for (std::size_t a = 0; a < ks[2]; ++a)
        for (std::size_t b = 0; b < ks[3]; ++b) {
          for (std::size_t y = 0; y < out.height; ++y)
            for (std::size_t x = 0; x < out.width; ++x) {
              const Index yi = static_cast<Index>(y + a) - static_cast<Index>(pad.rows);
              const Index xi = static_cast<Index>(x + b) - static_cast<Index>(pad.cols);
              if (yi < 0 || xi < 0 || yi >= static_cast<Index>(in.height) || xi >= static_cast<Index>(in.width))
                continue;
              const std::size_t row = (o * out.height + y) * out.width + x;
              const std::size_t col = (i * in.height + static_cast<std::size_t>(yi)) * in.width +
                                      static_cast<std::size_t>(xi);
              idx.entries.push_back(row * n_cols + col);
            }
          idx.offsets.push_back(idx.entries.size());
        }
  return cache.emplace(key, std::move(idx)).first->second;
}

}  // namespace

// ---------------------------------------------------------------- reconstruction

double recon_loss(const FcLayer& layer, const Tensor& h) {
  const Tensor hb = as_batch(h);
  Tensor e = matmul_nt(matmul_nt(hb, layer.weight), layer.inverse_weight);
  e -= hb;
  double s = 0.0;
  for (double v : e.data()) s += v * v;
  return s * inv_count(hb);
}

double recon_loss(const ConvLayer& layer, const Tensor& h) {
  const Tensor hb = h.rank() == 3 ? h.reshaped({1, h.size()}) : as_batch(h);
  Tensor e = conv_rows(conv_rows(hb, layer.kernel, layer.shape), layer.inverse_kernel, layer.shape);
  e -= hb;
  double s = 0.0;
  for (double v : e.data()) s += v * v;
  return s * inv_count(hb);
}

ReconGrads fc_recon_grads(const FcLayer& layer, const Tensor& h) { return fc_penalty(layer, h); }

ReconGrads conv_recon_grads(const ConvLayer& layer, const Tensor& h) {
  return conv_penalty(layer, h.rank() == 3 ? h.reshaped({1, h.size()}) : h);
}

// ---------------------------------------------------------------- fully connected

LayerGrad fc_exact_grads(const FcLayer& layer, const PathSignals& f, const PathSignals& g) {
  const Tensor w_inv = inverse(lu_factor(layer.weight));
  const Tensor r_inv = inverse(lu_factor(layer.inverse_weight));
  return fc_exact_grads(layer, f, g, w_inv, r_inv);
}

LayerGrad fc_exact_grads(const FcLayer& layer, const PathSignals& f, const PathSignals& g, const Tensor& weight_inv,
                         const Tensor& inverse_weight_inv) {
  LayerGrad out;
  const double scale = inv_count(f.input);
  const ReconGrads rec = fc_penalty(layer, f.input);

  out.forward.loglik = matmul_tn(f.delta_out, f.input);
  out.forward.loglik *= scale;
  out.forward.logdet = transpose(weight_inv);
  out.forward.recon = rec.forward;

  // d/dR log p^g: -R^{-T} delta_z^g x^T R^{-T} = -delta_x^g (z^g)^T, where z^g = R^{-1} x.
  out.inverse.loglik = matmul_tn(g.delta_in, g.output);
  out.inverse.loglik *= -inv_count(g.input);
  out.inverse.logdet = -1.0 * transpose(inverse_weight_inv);
  out.inverse.recon = rec.inverse;
  out.recon = rec.loss;
  return out;
}

LayerGrad fc_snf_grads(const FcLayer& layer, const PathSignals& f) {
  LayerGrad out;
  const double scale = inv_count(f.input);
  const ReconGrads rec = fc_penalty(layer, f.input);

  out.forward.loglik = matmul_tn(f.delta_out, f.input);
  out.forward.loglik *= scale;
  out.forward.logdet = transpose(layer.inverse_weight);
  out.forward.recon = rec.forward;

  out.inverse.loglik = matmul_tn(f.delta_in, f.output);
  out.inverse.loglik *= -scale;
  out.inverse.logdet = -1.0 * transpose(layer.weight);
  out.inverse.recon = rec.inverse;
  out.recon = rec.loss;
  return out;
}

// ---------------------------------------------------------------- convolution

Tensor conv_tap_projection(const Tensor& matrix, const Shape& kernel_shape, ImageShape in, Padding pad) {
  const ImageShape out = conv_output_shape(in, kernel_shape, pad);
  if (matrix.rank() != 2 || matrix.rows() != out.size() || matrix.cols() != in.size()) {
    throw ShapeError("conv_tap_projection: matrix " + shape_string(matrix.shape()) +
                     " does not match the convolution geometry");
  }
  const TapIndex& idx = tap_index(kernel_shape, in, pad);
  Tensor g(kernel_shape);
  auto m = matrix.data();
  for (std::size_t t = 0; t + 1 < idx.offsets.size(); ++t) {
    double s = 0.0;
    for (std::size_t e = idx.offsets[t]; e < idx.offsets[t + 1]; ++e) s += m[idx.entries[e]];
    g[t] = s;
  }
  return g;
}

LayerGrad conv_exact_grads(const ConvLayer& layer, const PathSignals& f, const PathSignals& g) {
  const Tensor t_w = build_conv_matrix(layer.kernel, layer.shape, layer.pad());
  const Tensor t_r = build_conv_matrix(layer.inverse_kernel, layer.shape, layer.inverse_pad());
  return conv_exact_grads(layer, f, g, inverse(lu_factor(t_w)), inverse(lu_factor(t_r)));
}

LayerGrad conv_exact_grads(const ConvLayer& layer, const PathSignals& f, const PathSignals& g,
                           const Tensor& conv_matrix_inv, const Tensor& inverse_conv_matrix_inv) {
  const ImageShape s = layer.shape;
  LayerGrad out;
  const ReconGrads rec = conv_penalty(layer, f.input);

  out.forward.loglik = batch_kernel_grad(f.delta_out, f.input, layer.kernel.shape(), s, layer.pad());
  out.forward.logdet = conv_tap_projection(transpose(conv_matrix_inv), layer.kernel.shape(), s, layer.pad());
  out.forward.recon = rec.forward;

  out.inverse.loglik =
      -1.0 * batch_kernel_grad(g.delta_in, g.output, layer.inverse_kernel.shape(), s, layer.inverse_pad());
  out.inverse.logdet =
      -1.0 * conv_tap_projection(transpose(inverse_conv_matrix_inv), layer.inverse_kernel.shape(), s,
                                 layer.inverse_pad());
  out.inverse.recon = rec.inverse;
  out.recon = rec.loss;
  return out;
}

LayerGrad conv_snf_grads(const ConvLayer& layer, const PathSignals& f) {
  const ImageShape s = layer.shape;
  const auto& ks = layer.kernel.shape();
  const auto& rs = layer.inverse_kernel.shape();
  LayerGrad out;
  const ReconGrads rec = conv_penalty(layer, f.input);

  out.forward.loglik = batch_kernel_grad(f.delta_out, f.input, ks, s, layer.pad());
  out.forward.logdet = hadamard(flip_kernel(crop_kernel_center(layer.inverse_kernel, ks[2], ks[3])), layer.multiple);
  out.forward.recon = rec.forward;

  out.inverse.loglik = -1.0 * batch_kernel_grad(f.delta_in, f.output, rs, s, layer.inverse_pad());
  out.inverse.logdet =
      -1.0 * hadamard(flip_kernel(pad_kernel_center(layer.kernel, rs[2], rs[3])), layer.inverse_multiple);
  out.inverse.recon = rec.inverse;
  out.recon = rec.loss;
  return out;
}

Tensor crop_kernel_center(const Tensor& k, std::size_t kh, std::size_t kw) {
  if (k.rank() != 4) throw ShapeError("crop_kernel_center: expected a rank-4 kernel");
  const std::size_t H = k.dim(2), W = k.dim(3);
  if (kh > H || kw > W || (H - kh) % 2 != 0 || (W - kw) % 2 != 0) {
    throw ShapeError("crop_kernel_center: cannot center a " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " window in " + shape_string(k.shape()));
  }
  const std::size_t oy = (H - kh) / 2, ox = (W - kw) / 2;
  Tensor c({k.dim(0), k.dim(1), kh, kw});
  for (std::size_t o = 0; o < k.dim(0); ++o)
    for (std::size_t i = 0; i < k.dim(1); ++i)
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b) c(o, i, a, b) = k(o, i, a + oy, b + ox);
  return c;
}

Tensor pad_kernel_center(const Tensor& k, std::size_t kh, std::size_t kw) {
  if (k.rank() != 4) throw ShapeError("pad_kernel_center: expected a rank-4 kernel");
  const std::size_t H = k.dim(2), W = k.dim(3);
  if (kh < H || kw < W || (kh - H) % 2 != 0 || (kw - W) % 2 != 0) {
    throw ShapeError("pad_kernel_center: cannot center " + shape_string(k.shape()) + " in a " +
                     std::to_string(kh) + "x" + std::to_string(kw) + " kernel");
  }
  const std::size_t oy = (kh - H) / 2, ox = (kw - W) / 2;
  Tensor p({k.dim(0), k.dim(1), kh, kw});
  for (std::size_t o = 0; o < k.dim(0); ++o)
    for (std::size_t i = 0; i < k.dim(1); ++i)
      for (std::size_t a = 0; a < H; ++a)
        for (std::size_t b = 0; b < W; ++b) p(o, i, a + oy, b + ox) = k(o, i, a, b);
  return p;
}

// ---------------------------------------------------------------- JVP penalty

JvpPenalty jvp_inverse_penalty(const FcLayer& layer, const Tensor& probes) {
  ReconGrads r = fc_penalty(layer, probes);
  return {r.loss, std::move(r.forward), std::move(r.inverse)};
}

JvpPenalty jvp_inverse_penalty(const ConvLayer& layer, const Tensor& probes) {
  ReconGrads r = conv_penalty(layer, probes);
  return {r.loss, std::move(r.forward), std::move(r.inverse)};
}

}  // namespace snf
