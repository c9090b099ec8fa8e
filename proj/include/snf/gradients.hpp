#pragma once

#include <vector>

#include "snf/layers.hpp"

namespace snf {

enum class GradMode { exact, snf };

const char* to_string(GradMode mode);
GradMode parse_grad_mode(const std::string& text);

/// Gradient of the mixture objective with respect to one parameter tensor,
/// split into its components. All components are ascent directions of the
/// objective except `recon` and `jvp`, which are gradients of the penalties.
struct ParamGrad {
  Tensor loglik;  ///< data term (backpropagated error times layer input)
  Tensor logdet;  ///< log-determinant term
  Tensor recon;   ///< gradient of the layer reconstruction error
  Tensor jvp;     ///< gradient of the Jacobian-vector-product penalty (zero when unused)

  /// 0.5 loglik + 0.5 logdet - lambda recon - jvp_weight jvp, accumulated in that order.
  Tensor total(double lambda, double jvp_weight = 0.0) const;
};

struct LayerGrad {
  std::size_t layer_index = 0;
  ParamGrad forward;  ///< W or w
  ParamGrad inverse;  ///< R or r
  double recon = 0.0;  ///< reconstruction error at this layer, batch mean
};

/// Per-layer gradients for one batch, averaged over the batch.
struct GradReport {
  GradMode mode = GradMode::snf;
  double lambda = 1.0;
  double jvp_weight = 0.0;
  std::vector<LayerGrad> layers;

  /// Totals of every parameter, forward before inverse, layer by layer.
  std::vector<Tensor> totals() const;
  /// Concatenated totals of one layer; forward parameters only when `forward_only`.
  std::vector<double> layer_flat(std::size_t i, bool forward_only = false) const;
  std::vector<double> flat(bool forward_only = false) const;
};

/// Activations and backpropagated errors around one layer for a batch.
/// Rows are examples. `delta_out` is d(log-likelihood)/d(output) and
/// `delta_in` is d(log-likelihood)/d(input), both excluding the
/// data-independent log-determinants of linear layers.
struct PathSignals {
  Tensor input;
  Tensor output;
  Tensor delta_out;
  Tensor delta_in;
};

// Reconstruction penalty ||g(f(h)) - h||^2, averaged over rows of h.
// h is treated as a constant: only this layer's parameters receive gradients.

struct ReconGrads {
  double loss = 0.0;
  Tensor forward;  ///< dE/dW or dE/dw
  Tensor inverse;  ///< dE/dR or dE/dr
};

double recon_loss(const FcLayer& layer, const Tensor& h);
double recon_loss(const ConvLayer& layer, const Tensor& h);
/// dE/dW = 2 R^T (R W h - h) h^T, dE/dR = 2 (R W h - h) (W h)^T.
ReconGrads fc_recon_grads(const FcLayer& layer, const Tensor& h);
ReconGrads conv_recon_grads(const ConvLayer& layer, const Tensor& h);

/// Exact gradients. `f` is the forward-model path, `g` the path through the
/// exact inverse of the learned inverse (R^{-1}); inverses are computed by LU.
LayerGrad fc_exact_grads(const FcLayer& layer, const PathSignals& f, const PathSignals& g);
/// As above with W^{-1} and R^{-1} supplied by the caller.
LayerGrad fc_exact_grads(const FcLayer& layer, const PathSignals& f, const PathSignals& g, const Tensor& weight_inv,
                         const Tensor& inverse_weight_inv);

/// Self-normalizing gradients: W^{-T} is replaced by R^T, R^{-T} by W^T and
/// the inverse path by the forward path. No inverse is computed.
LayerGrad fc_snf_grads(const FcLayer& layer, const PathSignals& f);

/// Exact convolution gradients through the materialized matrices T(w), T(r).
LayerGrad conv_exact_grads(const ConvLayer& layer, const PathSignals& f, const PathSignals& g);
LayerGrad conv_exact_grads(const ConvLayer& layer, const PathSignals& f, const PathSignals& g,
                           const Tensor& conv_matrix_inv, const Tensor& inverse_conv_matrix_inv);

/// Self-normalizing convolution gradients: the log-determinant terms are
/// flip(r) * m and -flip(w) * m, with center crop / zero pad when the kernel
/// sizes differ.
LayerGrad conv_snf_grads(const ConvLayer& layer, const PathSignals& f);

/// Sum of matrix entries over the positions each kernel tap occupies in T(k):
/// d(vec T(k))^T / dk * vec(matrix).
Tensor conv_tap_projection(const Tensor& matrix, const Shape& kernel_shape, ImageShape in, Padding pad);

/// Central spatial window of r with extent kh x kw.
Tensor crop_kernel_center(const Tensor& kernel, std::size_t kh, std::size_t kw);
/// w centered inside a zero kernel of extent kh x kw.
Tensor pad_kernel_center(const Tensor& kernel, std::size_t kh, std::size_t kw);

/// Monte-Carlo estimate of E_v ||J_g J_f v - v||^2 over the probe rows and its
/// parameter gradients. For linear layers J_g J_f v = R W v.
struct JvpPenalty {
  double loss = 0.0;
  Tensor forward;
  Tensor inverse;
};
JvpPenalty jvp_inverse_penalty(const FcLayer& layer, const Tensor& probes);
JvpPenalty jvp_inverse_penalty(const ConvLayer& layer, const Tensor& probes);

}  // namespace snf
