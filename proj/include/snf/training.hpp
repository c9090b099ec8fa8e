#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "snf/model.hpp"

namespace snf {

// Sign convention: gradients produced by compute_gradients are ascent
// directions of the mixture objective. The optimizer minimizes the loss
// -objective, so the trainer negates them before calling adam_step.

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam step descending `grads` (gradients of a loss).
/// `lr` overrides state.lr when given (warm-up).
void adam_step(AdamState& state, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
               std::optional<double> lr = std::nullopt);

/// base * min(1, epoch / warmup_epochs); epoch may be fractional.
double warmup_lr(double base_lr, double epoch, double warmup_epochs);

/// Rescales all tensors by min(1, max_norm / norm) where norm is the global L2
/// norm. Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);
double global_norm(const std::vector<Tensor>& grads);

struct LambdaController {
  enum class Mode { fixed, geco };
  Mode mode = Mode::fixed;
  double lambda = 1.0;
  double ema = 0.0;  ///< moving average of recon - tolerance
  double decay = 0.99;
  double gain = 1.0;
  double tolerance = 1e-3;
  double lambda_min = 1e-3;
  double lambda_max = 1e4;
};

/// C <- decay C + (1 - decay)(recon - tolerance); lambda <- clamp(lambda exp(gain C)).
/// Fixed mode leaves lambda untouched. Returns the new lambda.
double geco_update(LambdaController& ctrl, double recon);

/// Which gradients enter the angle diagnostic: the forward parameters (the
/// flow's own likelihood gradient) or forward and inverse parameters together.
enum class AngleScope { forward, both };
AngleScope parse_angle_scope(const std::string& text);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 128;
  double lr = 1e-4;
  double warmup_epochs = 10.0;
  std::optional<double> clip;  ///< global gradient-norm bound
  LambdaController lambda;
  GradOptions grad;  ///< mode, strict exact, JVP penalty; grad.lambda is overwritten from the controller
  std::uint64_t seed = 0;

  /// Every n-th batch in snf mode also computes (but does not apply) exact
  /// gradients to record gradient angles. 0 disables.
  std::size_t angle_every = 0;
  AngleScope angle_scope = AngleScope::forward;
  /// Diagnostic: set R = W^{-1} before every step.
  bool resync_inverse = false;

  /// Abort when the loss is non-finite or exceeds this magnitude.
  double divergence_limit = 1e10;
  /// Flag the run unstable when the epoch's mean reconstruction error exceeds
  /// this (the learned inverse no longer tracks the forward model).
  double recon_limit = 1.0;

  void validate() const;
};

struct TrainState {
  AdamState adam;
  LambdaController lambda;
  std::size_t epoch = 0;  ///< completed epochs
  std::uint64_t step = 0;
  Rng rng;
  double best_valid_nll = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

/// Training data. Pixel datasets are dequantized and logit-transformed per
/// batch; their reported NLL includes the preprocessing log-det.
struct TrainData {
  Tensor train;
  Tensor valid;
  bool pixels = false;
  PreprocessSpec preprocess;
};

enum class RunStatus { ok, diverged, unstable };
const char* to_string(RunStatus s);

struct StepResult {
  double nll = 0.0;  ///< -mean log p^f, including preprocessing
  double recon = 0.0;
  double loss = 0.0;  ///< -objective
  double grad_norm = 0.0;
  std::vector<double> angles;  ///< per linear layer, when sampled
  double global_angle = std::numeric_limits<double>::quiet_NaN();
};

struct EpochMetrics {
  std::size_t epoch = 0;  ///< 1-based
  double nll = 0.0;
  double recon = 0.0;
  double lambda = 0.0;
  double seconds = 0.0;
  double angle_mean = std::numeric_limits<double>::quiet_NaN();
  double angle_std = std::numeric_limits<double>::quiet_NaN();
  double angle_global = std::numeric_limits<double>::quiet_NaN();  ///< whole-model angle, mean over samples
  double valid_nll = std::numeric_limits<double>::quiet_NaN();
  double valid_recon = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> angles;  ///< per sampled step, per layer
  std::vector<double> step_losses;
  RunStatus status = RunStatus::ok;
  std::string message;
};

class Trainer {
 public:
  Trainer(FlowModel& model, TrainConfig config);
  Trainer(FlowModel& model, TrainConfig config, TrainState state);

  /// One optimizer step on a (raw) batch. Throws Divergence.
  StepResult step(const Tensor& batch, const TrainData& data, double fractional_epoch);
  /// One pass over the shuffled training rows followed by validation.
  EpochMetrics run_epoch(const TrainData& data);

  /// Exact mean NLL (nats per example) of rows, using the amortized cache.
  double evaluate_nll(const Tensor& rows, const TrainData& data);

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return config_; }
  FlowModel& model() { return model_; }

 private:
  Tensor prepare(const Tensor& rows, const TrainData& data, Rng* noise, Tensor* logdet) const;

  FlowModel& model_;
  TrainConfig config_;
  TrainState state_;
};

/// Rows of `data` selected by `index`.
Tensor gather_rows(const Tensor& data, std::span<const std::size_t> index);

// Metrics CSV: epoch,split,nll,recon,lambda,seconds,angle_mean,angle_std
std::string metrics_csv_header();
std::string metrics_csv_row(std::size_t epoch, const std::string& split, double nll, double recon, double lambda,
                            double seconds, double angle_mean, double angle_std);

}  // namespace snf
