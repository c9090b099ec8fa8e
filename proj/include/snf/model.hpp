#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "snf/gradients.hpp"
#include "snf/layers.hpp"

namespace snf {

/// log N(z; 0, I) for one flat vector.
double standard_normal_logpdf(std::span<const double> z);

/// Per-row results of pushing a batch through the forward model.
struct ForwardTrace {
  std::vector<Tensor> activations;  ///< activations[k] is the input of layer k; back() is z
  Tensor base_logprob;              ///< [N]
  Tensor activation_logdet;         ///< [N], sum over activation layers
  double linear_logdet = 0.0;       ///< data-independent sum of log|W_k| and log|T(w_k)|
  std::vector<double> layer_logdets;  ///< per layer; activation entries are batch means

  /// log p(x) per row.
  Tensor log_prob() const;
};

struct AmortizedStats {
  std::uint64_t hits = 0;
  std::uint64_t recomputes = 0;
};

enum class ProbeDistribution { normal, rademacher };
ProbeDistribution parse_probe_distribution(const std::string& text);

struct GradOptions {
  GradMode mode = GradMode::snf;
  double lambda = 1.0;
  double jvp_weight = 0.0;
  std::size_t jvp_probes = 1;
  ProbeDistribution probe = ProbeDistribution::normal;
  /// Exact conv gradients propagate the inverse-model error through T(r)^{-1}
  /// instead of reusing the forward-model error. FC layers always do.
  bool strict_exact = false;
};

/// Gradients for one batch plus the objective values they belong to.
struct BatchGradients {
  GradReport report;
  double log_prob_f = 0.0;  ///< mean log p^f over the batch
  double log_prob_g = 0.0;  ///< mean log p^g; equals log_prob_f in snf mode (never materialized)
  double recon = 0.0;       ///< sum over layers of the mean reconstruction error
  double jvp = 0.0;
  /// Mixture objective 0.5 log p^f + 0.5 log p^g - lambda recon - jvp_weight jvp.
  double objective = 0.0;
};

struct MixtureValue {
  double log_prob_f = 0.0;
  double log_prob_g = 0.0;
  double recon = 0.0;
  double objective = 0.0;  ///< to be maximized
};

enum class InverseMode { learned, exact };
InverseMode parse_inverse_mode(const std::string& text);

/// An ordered composition of layers over a fixed D-dimensional space with a
/// standard Gaussian base. Flat data rows are interpreted with `input_shape`
/// (vector data uses {D, 1, 1}).
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(ImageShape input_shape, std::vector<Layer> layers, std::string topology = "custom");

  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }
  std::size_t dim() const { return input_shape_.size(); }
  ImageShape input_shape() const { return input_shape_; }
  ImageShape layer_shape(std::size_t k) const { return shapes_.at(k); }
  const std::string& topology() const { return topology_; }

  /// Mutable layer access; invalidates the amortized log-det cache.
  Layer& mutable_layer(std::size_t k);
  /// Parameter tensors in optimizer order (forward then inverse, layer by
  /// layer), matching GradReport::totals(). Invalidates the cache.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  /// Indices of layers with parameters.
  std::vector<std::size_t> linear_layers() const;

  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  /// Recomputes the data-independent log-dets if parameters changed since the
  /// last call; otherwise counts a hit and does nothing.
  void amortize_logdets();
  bool cache_fresh() const { return cache_version_ == version_ && cache_valid_; }
  const std::vector<double>& cached_logdets() const { return cached_logdets_; }
  const AmortizedStats& amortized_stats() const { return stats_; }

  /// Forward pass. `amortized` reads linear log-dets from the cache
  /// (refreshing it first if stale); otherwise they are factorized afresh.
  ForwardTrace forward(const Tensor& batch, bool amortized = false);
  ForwardTrace forward_uncached(const Tensor& batch) const;

  /// Maps base samples [N, D] back to data space.
  Tensor inverse(const Tensor& z, InverseMode mode) const;

 private:
  ForwardTrace trace(const Tensor& batch, const std::vector<double>* logdets) const;

  ImageShape input_shape_;
  std::vector<Layer> layers_;
  std::vector<ImageShape> shapes_;
  std::string topology_ = "custom";
  std::uint64_t version_ = 0;
  std::uint64_t cache_version_ = 0;
  bool cache_valid_ = false;
  std::vector<double> cached_logdets_;
  AmortizedStats stats_;
};

/// log|det| of the data-independent Jacobian of one linear layer (0 otherwise).
double linear_logdet(const Layer& layer);
/// -log|det| of the learned inverse of one linear layer, i.e. log|J| of R^{-1}.
double inverse_model_logdet(const Layer& layer);

/// Exact log p(x) per row, with log-dets factorized afresh.
Tensor log_prob_forward(const FlowModel& model, const Tensor& batch);
/// As above but reusing the amortized cache.
Tensor log_prob_amortized(FlowModel& model, const Tensor& batch);
/// log p^g(x) per row: the density of the model whose layers are the exact
/// inverses of the learned inverses. Throws SingularMatrix if any R is singular.
Tensor log_prob_inverse_model(const FlowModel& model, const Tensor& batch);

/// Mixture objective evaluated exactly (log p^g by LU). Batch means.
MixtureValue mixture_objective(const FlowModel& model, const Tensor& batch, double lambda);
/// Sum over linear layers of the mean reconstruction error along the forward path.
double total_recon(const FlowModel& model, const Tensor& batch);

/// Gradients of the mixture objective (ascent directions). `rng` draws the
/// JVP probes and may be null when jvp_weight is 0.
BatchGradients compute_gradients(const FlowModel& model, const Tensor& batch, const GradOptions& options,
                                 Rng* rng = nullptr);

/// Draws n base samples and maps them to data space.
Tensor sample(const FlowModel& model, std::size_t n, InverseMode mode, Rng& rng);

/// Sets every inverse parameter to the exact inverse of its forward
/// counterpart. Convolutions must be 1x1 (a k x k kernel has no exact k x k inverse).
void resync_inverse(FlowModel& model);

// Preprocessing of pixel data: dequantize, scale, shrink away from {0, 1}, logit.
struct PreprocessSpec {
  bool dequantize = true;
  double scale = 1.0 / 256.0;
  double shrink = 1e-6;  ///< lambda_p
};

struct Preprocessed {
  Tensor x;
  Tensor logdet;  ///< [N], log|dx/dpixel| per row
};

/// `noise` supplies u ~ U[0,1) per element when dequantizing; pass null to use u = 0.
Preprocessed preprocess(const PreprocessSpec& spec, const Tensor& pixels, Rng* noise);
/// Inverse of the continuous part: returns (pixel + u) values.
Tensor deprocess(const PreprocessSpec& spec, const Tensor& x);

// Model builders. All layers are initialized from `rng`.
struct ModelSpec {
  std::string topology = "fc2";  ///< fc2, conv9 or custom:<tokens>
  double alpha = 0.3;
  std::size_t inverse_kernel = 0;  ///< r extent for convolutions; 0 means same as w
  double init_gain = 0.01;
};

/// custom tokens: fc, slrelu[:alpha], conv<k>, squeeze.
FlowModel build_model(const ModelSpec& spec, ImageShape input_shape, Rng& rng);

}  // namespace snf
