#include "snf/diagnostics.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

namespace snf {

double gradient_angle(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("gradient_angle: lengths differ");
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 && nb == 0.0) throw DegenerateInput("gradient_angle: both gradients are zero");
  if (na == 0.0 || nb == 0.0) return 90.0;
  const double c = std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

std::vector<double> layer_angles(const GradReport& approx, const GradReport& exact, AngleScope scope) {
  const bool fwd = scope == AngleScope::forward;
  if (approx.layers.size() != exact.layers.size()) throw ShapeError("layer_angles: reports differ in layer count");
  std::vector<double> out;
  out.reserve(approx.layers.size());
  for (std::size_t i = 0; i < approx.layers.size(); ++i) {
    out.push_back(gradient_angle(approx.layer_flat(i, fwd), exact.layer_flat(i, fwd)));
  }
  return out;
}

double global_angle(const GradReport& approx, const GradReport& exact, AngleScope scope) {
  const bool fwd = scope == AngleScope::forward;
  return gradient_angle(approx.flat(fwd), exact.flat(fwd));
}

std::vector<AngleRecord> angle_sweep(FlowModel& model, const TrainData& data, TrainConfig config,
                                     std::size_t n_epochs) {
  config.grad.mode = GradMode::snf;
  if (config.angle_every == 0) config.angle_every = kDefaultAngleEvery;
  config.epochs = std::max<std::size_t>(n_epochs, 1);
  Trainer trainer(model, config);
  std::vector<AngleRecord> out;
  for (std::size_t e = 0; e < n_epochs; ++e) {
    const EpochMetrics m = trainer.run_epoch(data);
    if (m.status == RunStatus::diverged) throw Divergence("angle sweep diverged: " + m.message);
    AngleRecord rec;
    rec.epoch = m.epoch;
    rec.mean = m.angle_mean;
    rec.std = m.angle_std;
    rec.global = m.angle_global;
    if (!m.angles.empty()) {
      rec.layer_degrees.assign(m.angles.front().size(), 0.0);
      for (const auto& step : m.angles)
        for (std::size_t l = 0; l < step.size(); ++l) rec.layer_degrees[l] += step[l];
      for (double& v : rec.layer_degrees) v /= static_cast<double>(m.angles.size());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<TimingRecord> timing_sweep(const std::vector<std::size_t>& dims, GradMode mode,
                                       const TimingOptions& options) {
  using Clock = std::chrono::steady_clock;
  if (options.n_batches == 0) throw ConfigError("timing_sweep needs at least one timed batch");
  // Slope fits need single-threaded products; restore the caller's setting afterwards.
  struct ThreadPin {
    std::size_t saved = thread_count();
    ThreadPin() { set_thread_count(1); }
    ~ThreadPin() { set_thread_count(saved); }
  } pin;
  std::vector<TimingRecord> out;
  for (std::size_t D : dims) {
    Rng rng(options.seed + D);
    std::vector<Layer> layers;
    layers.emplace_back(FcLayer::initialized(D, rng));
    FlowModel model(ImageShape{D, 1, 1}, std::move(layers), "custom:fc");
    AdamState adam;
    GradOptions opt;
    opt.mode = mode;
    std::vector<double> times;
    for (std::size_t b = 0; b < options.warmup_batches + options.n_batches; ++b) {
      const Tensor x = rng.normal_tensor({options.batch, D});
      const auto t0 = Clock::now();
      BatchGradients bg = compute_gradients(model, x, opt);
      std::vector<Tensor> grads = bg.report.totals();
      for (auto& g : grads) g *= -1.0;
      adam_step(adam, model.parameters(), grads);
      const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
      if (b >= options.warmup_batches) times.push_back(dt);
    }
    TimingRecord r;
    r.dim = D;
    r.mode = mode;
    r.n_batches = times.size();
    for (double t : times) r.mean_seconds += t;
    r.mean_seconds /= static_cast<double>(times.size());
    for (double t : times) r.std_seconds += (t - r.mean_seconds) * (t - r.mean_seconds);
    r.std_seconds = std::sqrt(r.std_seconds / static_cast<double>(times.size()));
    out.push_back(r);
  }
  return out;
}

double loglog_slope(const std::vector<TimingRecord>& records) {
  if (records.size() < 2) throw ConfigError("loglog_slope needs at least two dimensions");
  double mx = 0.0, my = 0.0;
  for (const auto& r : records) {
    mx += std::log(static_cast<double>(r.dim));
    my += std::log(r.mean_seconds);
  }
  mx /= static_cast<double>(records.size());
  my /= static_cast<double>(records.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& r : records) {
    const double dx = std::log(static_cast<double>(r.dim)) - mx;
    sxy += dx * (std::log(r.mean_seconds) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DegenerateInput("loglog_slope: all dimensions are equal");
  return sxy / sxx;
}

Tensor finite_diff_jacobian(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h) {
  const std::size_t n = x.size();
  Tensor jac;
  for (std::size_t j = 0; j < n; ++j) {
    Tensor xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    const Tensor fp = fn(xp), fm = fn(xm);
    if (j == 0) jac = Tensor({fp.size(), n});
    for (std::size_t i = 0; i < fp.size(); ++i) jac(i, j) = (fp[i] - fm[i]) / (2.0 * h);
  }
  return jac;
}

void write_angles_csv(const std::string& path, const std::vector<AngleRecord>& records) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out.precision(17);
  out << "epoch,layer,degrees\n";
  for (const auto& r : records) {
    for (std::size_t l = 0; l < r.layer_degrees.size(); ++l) out << r.epoch << ',' << l << ',' << r.layer_degrees[l] << '\n';
    out << r.epoch << ",mean," << r.mean << '\n';
    out << r.epoch << ",std," << r.std << '\n';
    out << r.epoch << ",global," << r.global << '\n';
  }
}

void write_timing_csv(const std::string& path, const std::vector<TimingRecord>& records) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out.precision(17);
  out << "D,mode,mean_s,std_s\n";
  for (const auto& r : records) out << r.dim << ',' << to_string(r.mode) << ',' << r.mean_seconds << ',' << r.std_seconds << '\n';
}

}  // namespace snf
