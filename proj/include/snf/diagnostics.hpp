#pragma once

#include <functional>
#include <string>
#include <vector>

#include "snf/training.hpp"

namespace snf {

/// Angle in degrees between two flattened gradients, cosine clamped to [-1, 1].
/// Throws DegenerateInput when both are zero; a single zero vector gives 90.
double gradient_angle(std::span<const double> a, std::span<const double> b);

/// Per-layer angles between two reports over the same model.
std::vector<double> layer_angles(const GradReport& approx, const GradReport& exact,
                                 AngleScope scope = AngleScope::forward);
/// Angle between the concatenated gradients of all layers.
double global_angle(const GradReport& approx, const GradReport& exact, AngleScope scope = AngleScope::forward);

struct AngleRecord {
  std::size_t epoch = 0;
  std::vector<double> layer_degrees;  ///< per layer, averaged over the sampled batches
  double mean = 0.0;                  ///< mean over layers and sampled batches
  double std = 0.0;
  double global = 0.0;  ///< angle of the concatenated gradients, averaged over sampled batches
};

inline constexpr std::size_t kDefaultAngleEvery = 10;

/// Trains in snf mode for n_epochs, sampling exact gradients every
/// config.angle_every batches (kDefaultAngleEvery when 0), and records angles.
std::vector<AngleRecord> angle_sweep(FlowModel& model, const TrainData& data, TrainConfig config,
                                     std::size_t n_epochs);

struct TimingRecord {
  std::size_t dim = 0;
  GradMode mode = GradMode::snf;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  std::size_t n_batches = 0;
};

struct TimingOptions {
  std::size_t batch = 128;
  std::size_t n_batches = 5;
  std::size_t warmup_batches = 1;  ///< timed but excluded
  std::uint64_t seed = 0;
};

/// Time per training step of a single FC layer (no activation) for each D.
/// Matrix products run single-threaded for the duration of the sweep.
std::vector<TimingRecord> timing_sweep(const std::vector<std::size_t>& dims, GradMode mode,
                                       const TimingOptions& options);
/// Least-squares slope of log(mean_seconds) against log(dim).
double loglog_slope(const std::vector<TimingRecord>& records);

/// Central-difference Jacobian of fn at x: J[i, j] = d fn_i / d x_j.
Tensor finite_diff_jacobian(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h = 1e-6);

void write_angles_csv(const std::string& path, const std::vector<AngleRecord>& records);
void write_timing_csv(const std::string& path, const std::vector<TimingRecord>& records);

}  // namespace snf
