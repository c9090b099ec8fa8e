#include "snf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "snf/diagnostics.hpp"

namespace snf {

void adam_step(AdamState& s, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
               std::optional<double> lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (s.m.size() != params.size()) {
    s.m.clear();
    s.v.clear();
    for (const Tensor* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
  }
  ++s.step;
  const double rate = lr.value_or(s.lr);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_same_shape(*params[p], grads[p], "adam_step");
    auto w = params[p]->data();
    auto g = grads[p].data();
    auto m = s.m[p].data();
    auto v = s.v[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      w[i] -= rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
    }
  }
}

double warmup_lr(double base_lr, double epoch, double warmup_epochs) {
  if (warmup_epochs <= 0.0) return base_lr;
  return base_lr * std::clamp(epoch / warmup_epochs, 0.0, 1.0);
}

double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

double geco_update(LambdaController& c, double recon) {
  if (c.mode == LambdaController::Mode::fixed) return c.lambda;
  c.ema = c.decay * c.ema + (1.0 - c.decay) * (recon - c.tolerance);
  c.lambda = std::clamp(c.lambda * std::exp(c.gain * c.ema), c.lambda_min, c.lambda_max);
  return c.lambda;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(warmup_epochs >= 0.0)) throw ConfigError("warmup must be non-negative");
  if (clip && !(*clip > 0.0)) throw ConfigError("clip norm must be positive");
  if (!(lambda.lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (lambda.mode == LambdaController::Mode::geco) {
    if (!(lambda.lambda_min > 0.0 && lambda.lambda_min <= lambda.lambda_max))
      throw ConfigError("lambda bounds must satisfy 0 < min <= max");
    if (!(lambda.decay >= 0.0 && lambda.decay < 1.0)) throw ConfigError("GECO decay must lie in [0, 1)");
  }
  if (grad.jvp_weight < 0.0) throw ConfigError("jvp penalty weight must be non-negative");
  if (grad.jvp_weight > 0.0 && grad.jvp_probes == 0) throw ConfigError("jvp penalty needs at least one probe");
}

AngleScope parse_angle_scope(const std::string& text) {
  if (text == "forward") return AngleScope::forward;
  if (text == "both") return AngleScope::both;
  throw ConfigError("unknown angle scope '" + text + "' (expected forward or both)");
}

const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::diverged: return "diverged";
    case RunStatus::unstable: return "unstable";
  }
  return "?";
}

Tensor gather_rows(const Tensor& data, std::span<const std::size_t> index) {
  Tensor out({index.size(), data.cols()});
  for (std::size_t r = 0; r < index.size(); ++r) {
    auto src = data.row(index[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

// ---------------------------------------------------------------- Trainer

namespace {

// Seeds validation dequantization noise so every evaluation sees the same data.
constexpr std::uint64_t kEvalNoiseSalt = 0x5EEDF00DULL;
constexpr std::size_t kEvalChunk = 1024;

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return t.size() ? s / static_cast<double>(t.size()) : 0.0;
}

}  // namespace

Trainer::Trainer(FlowModel& model, TrainConfig config) : Trainer(model, config, TrainState{}) {
  state_.rng = Rng(config_.seed);
  state_.lambda = config_.lambda;
  state_.adam.lr = config_.lr;
}

Trainer::Trainer(FlowModel& model, TrainConfig config, TrainState state)
    : model_(model), config_(std::move(config)), state_(std::move(state)) {
  config_.validate();
}

Tensor Trainer::prepare(const Tensor& rows, const TrainData& data, Rng* noise, Tensor* logdet) const {
  if (!data.pixels) {
    if (logdet) *logdet = Tensor({rows.rows()});
    return rows;
  }
  Preprocessed p = preprocess(data.preprocess, rows, noise);
  if (logdet) *logdet = std::move(p.logdet);
  return std::move(p.x);
}

StepResult Trainer::step(const Tensor& batch, const TrainData& data, double fractional_epoch) {
  if (config_.resync_inverse) resync_inverse(model_);
  Tensor pre_logdet;
  const Tensor x = prepare(batch, data, &state_.rng, &pre_logdet);

  GradOptions opt = config_.grad;
  opt.lambda = state_.lambda.lambda;
  const bool sample_angle = config_.angle_every > 0 && opt.mode == GradMode::snf &&
                            state_.step % config_.angle_every == 0;
  Rng probe_copy = state_.rng;
  BatchGradients bg = compute_gradients(model_, x, opt, &state_.rng);

  StepResult r;
  r.nll = -(bg.log_prob_f + mean_of(pre_logdet));
  r.recon = bg.recon;
  r.loss = -bg.objective;
  if (!std::isfinite(r.loss) || std::abs(r.loss) > config_.divergence_limit) {
    throw Divergence("loss " + std::to_string(r.loss) + " at step " + std::to_string(state_.step) +
                     " (lambda " + std::to_string(opt.lambda) + ")");
  }

  if (sample_angle) {
    GradOptions ex = opt;
    ex.mode = GradMode::exact;
    const BatchGradients eg = compute_gradients(model_, x, ex, &probe_copy);
    r.angles = layer_angles(bg.report, eg.report, config_.angle_scope);
    r.global_angle = global_angle(bg.report, eg.report, config_.angle_scope);
  }

  std::vector<Tensor> grads = bg.report.totals();
  for (auto& g : grads) g *= -1.0;
  r.grad_norm = config_.clip ? clip_grad_norm(grads, *config_.clip) : global_norm(grads);
  adam_step(state_.adam, model_.parameters(), grads, warmup_lr(config_.lr, fractional_epoch, config_.warmup_epochs));
  geco_update(state_.lambda, bg.recon);
  ++state_.step;
  return r;
}

double Trainer::evaluate_nll(const Tensor& rows, const TrainData& data) {
  if (rows.rows() == 0) return std::numeric_limits<double>::quiet_NaN();
  Rng noise(config_.seed ^ kEvalNoiseSalt);
  double total = 0.0;
  for (std::size_t start = 0; start < rows.rows(); start += kEvalChunk) {
    const std::size_t end = std::min(rows.rows(), start + kEvalChunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor pre;
    const Tensor x = prepare(gather_rows(rows, idx), data, &noise, &pre);
    Tensor lp = model_.forward(x, true).log_prob();
    lp += pre;
    for (double v : lp.data()) total -= v;
  }
  return total / static_cast<double>(rows.rows());
}

EpochMetrics Trainer::run_epoch(const TrainData& data) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  EpochMetrics em;
  em.epoch = state_.epoch + 1;
  const std::size_t n = data.train.rows();
  if (n == 0) throw ConfigError("training split is empty");
  const auto perm = state_.rng.permutation(n);
  const std::size_t B = config_.batch;
  const std::size_t nb = (n + B - 1) / B;

  double nll = 0.0, recon = 0.0;
  std::size_t seen = 0;
  std::vector<double> pooled;
  double global_sum = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * B, hi = std::min(n, lo + B);
    const Tensor batch = gather_rows(data.train, std::span(perm).subspan(lo, hi - lo));
    const double frac = static_cast<double>(state_.epoch) + static_cast<double>(b + 1) / static_cast<double>(nb);
    StepResult r;
    try {
      r = step(batch, data, frac);
    } catch (const Divergence& e) {
      em.status = RunStatus::diverged;
      em.message = e.what();
      break;
    } catch (const SingularMatrix& e) {
      em.status = RunStatus::diverged;
      em.message = std::string("singular layer: ") + e.what();
      break;
    } catch (const NoConvergence& e) {
      em.status = RunStatus::diverged;
      em.message = e.what();
      break;
    }
    const double w = static_cast<double>(hi - lo);
    nll += w * r.nll;
    recon += w * r.recon;
    seen += hi - lo;
    em.step_losses.push_back(r.loss);
    if (!r.angles.empty()) {
      pooled.insert(pooled.end(), r.angles.begin(), r.angles.end());
      global_sum += r.global_angle;
      em.angles.push_back(std::move(r.angles));
    }
  }
  ++state_.epoch;
  em.nll = seen ? nll / static_cast<double>(seen) : std::numeric_limits<double>::quiet_NaN();
  em.recon = seen ? recon / static_cast<double>(seen) : std::numeric_limits<double>::quiet_NaN();
  em.lambda = state_.lambda.lambda;
  if (!pooled.empty()) {
    double m = 0.0;
    for (double a : pooled) m += a;
    m /= static_cast<double>(pooled.size());
    double v = 0.0;
    for (double a : pooled) v += (a - m) * (a - m);
    em.angle_mean = m;
    em.angle_std = std::sqrt(v / static_cast<double>(pooled.size()));
    em.angle_global = global_sum / static_cast<double>(em.angles.size());
  }

  if (em.status == RunStatus::ok && !data.valid.empty()) {
    try {
      em.valid_nll = evaluate_nll(data.valid, data);
      Rng noise(config_.seed ^ kEvalNoiseSalt);
      em.valid_recon = total_recon(model_, prepare(data.valid, data, &noise, nullptr));
    } catch (const SingularMatrix& e) {
      em.status = RunStatus::diverged;
      em.message = std::string("singular layer during validation: ") + e.what();
    }
    if (em.status == RunStatus::ok && !std::isfinite(em.valid_nll)) {
      em.status = RunStatus::diverged;
      em.message = "non-finite validation NLL";
    }
  }
  if (em.status == RunStatus::ok && em.recon > config_.recon_limit) {
    em.status = RunStatus::unstable;
    em.message = "reconstruction error " + std::to_string(em.recon) + " exceeds " + std::to_string(config_.recon_limit);
  }
  if (em.status == RunStatus::ok) {
    const double score = !data.valid.empty() ? em.valid_nll : em.nll;
    if (score < state_.best_valid_nll) {
      state_.best_valid_nll = score;
      state_.best_epoch = em.epoch;
    }
  }
  em.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return em;
}

std::string metrics_csv_header() { return "epoch,split,nll,recon,lambda,seconds,angle_mean,angle_std"; }

std::string metrics_csv_row(std::size_t epoch, const std::string& split, double nll, double recon, double lambda,
                            double seconds, double angle_mean, double angle_std) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.6f,%.17g,%.17g", epoch, split.c_str(), nll, recon, lambda,
                seconds, angle_mean, angle_std);
  return buf;
}

}  // namespace snf
