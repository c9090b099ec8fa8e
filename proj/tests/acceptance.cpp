// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Optional arguments select criteria
// by number, e.g. `acceptance 1 3 8`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <string>

#include "oracles.hpp"
#include "snf/data_io.hpp"
#include "snf/diagnostics.hpp"

using namespace snf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ConvLayer conv_with(const Tensor& w, const Tensor& r, ImageShape in) {
  ConvLayer layer;
  layer.kernel = w;
  layer.inverse_kernel = r;
  layer.bind(in);
  return layer;
}

// A k x k kernel acting through its centre tap only: per-pixel channel mixing by a.
Tensor centre_kernel(const Tensor& a, std::size_t k) {
  const std::size_t c = a.rows();
  Tensor t({c, c, k, k});
  for (std::size_t o = 0; o < c; ++o)
    for (std::size_t i = 0; i < c; ++i) t(o, i, k / 2, k / 2) = a(o, i);
  return t;
}

double worst_rel_err(const GradReport& a, const GradReport& b) {
  const auto ta = a.totals(), tb = b.totals();
  double worst = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, oracle::rel_err(ta[i], tb[i]));
  return worst;
}

// ---------------------------------------------------------------- 1

Outcome gradient_equality() {
  double worst = 0.0;
  int cases = 0;
  GradOptions opts;
  opts.lambda = 1.0;
  const auto compare = [&](const FlowModel& model, const Tensor& x, bool strict) {
    opts.mode = GradMode::snf;
    opts.strict_exact = false;
    const GradReport snf = compute_gradients(model, x, opts).report;
    opts.mode = GradMode::exact;
    opts.strict_exact = strict;
    worst = std::max(worst, worst_rel_err(snf, compute_gradients(model, x, opts).report));
    ++cases;
  };

  std::uint64_t seed = 1000;
  for (std::size_t d : {2u, 4u, 8u, 16u}) {
    for (int rep = 0; rep < 3; ++rep) {
      const Tensor w1 = oracle::well_conditioned(d, seed++), w2 = oracle::well_conditioned(d, seed++);
      FlowModel model({d, 1, 1}, {FcLayer{w1, oracle::gauss_jordan_inverse(w1)}, SmoothLeakyRelu{0.3},
                                  FcLayer{w2, oracle::gauss_jordan_inverse(w2)}});
      compare(model, oracle::gaussian({32, d}, seed++), false);
    }
  }
  // Convolutions with an exact convolutional inverse: 1x1 kernels, and 3x3
  // kernels that act through their centre tap (with 3x3 or 5x5 inverses).
  struct ConvCase {
    ImageShape s;
    std::size_t k, rk;
  };
  for (const ConvCase& c : {ConvCase{{1, 8, 8}, 1, 1}, ConvCase{{3, 4, 4}, 1, 1}, ConvCase{{2, 8, 8}, 1, 3},
                            ConvCase{{2, 5, 7}, 3, 3}, ConvCase{{3, 8, 8}, 3, 3}, ConvCase{{2, 6, 6}, 3, 5}}) {
    const std::size_t ch = c.s.channels;
    const Tensor a1 = oracle::well_conditioned(ch, seed++), a2 = oracle::well_conditioned(ch, seed++);
    FlowModel model(c.s, {conv_with(centre_kernel(a1, c.k), centre_kernel(oracle::gauss_jordan_inverse(a1), c.rk), c.s),
                          SmoothLeakyRelu{0.3},
                          conv_with(centre_kernel(a2, c.k), centre_kernel(oracle::gauss_jordan_inverse(a2), c.rk), c.s)});
    const Tensor x = oracle::gaussian({8, c.s.size()}, seed++);
    compare(model, x, false);
    compare(model, x, true);
  }
  return {worst <= 1e-9, fmt("%d cases, worst relative difference %.2e (bar 1e-9)", cases, worst)};
}

// ---------------------------------------------------------------- 2

// Relative error of every parameter's exact gradient against central
// differences of the objective, with each reconstruction term's layer input
// held at its unperturbed value.
double fd_worst(FlowModel& model, const Tensor& x, double lambda) {
  GradOptions opts;
  opts.mode = GradMode::exact;
  opts.strict_exact = true;
  opts.lambda = lambda;
  const auto totals = compute_gradients(model, x, opts).report.totals();
  const std::vector<Tensor> frozen = model.forward_uncached(x).activations;
  const auto objective = [&] {
    double recon = 0.0;
    for (std::size_t k = 0; k < model.size(); ++k) {
      const Tensor& h = frozen[k];
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, FcLayer> || std::is_same_v<L, ConvLayer>) {
              // Independent recomputation of ||g(f(h)) - h||^2 through the probed matrices.
              Tensor t, tr;
              if constexpr (std::is_same_v<L, FcLayer>) {
                t = l.weight;
                tr = l.inverse_weight;
              } else {
                const ImageShape s = model.layer_shape(k);
                t = oracle::probe_conv_matrix(l.kernel, s.channels, s.height, s.width);
                tr = oracle::probe_conv_matrix(l.inverse_kernel, s.channels, s.height, s.width);
              }
              const Tensor back =
                  oracle::naive_matmul(oracle::naive_matmul(h, oracle::naive_transpose(t)), oracle::naive_transpose(tr));
              double s = 0.0;
              for (std::size_t i = 0; i < h.size(); ++i) s += std::pow(back.data()[i] - h.data()[i], 2);
              recon += s / static_cast<double>(h.rows());
            }
          },
          model.layers()[k]);
    }
    return mixture_objective(model, x, 0.0).objective - lambda * recon;
  };
  auto params = model.parameters();
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor numeric = oracle::numeric_gradient(*params[p], [&] {
      model.touch();
      return objective();
    });
    worst = std::max(worst, oracle::rel_err(totals[p], numeric));
  }
  return worst;
}

Outcome finite_differences() {
  double worst = 0.0;
  int cases = 0;
  std::uint64_t seed = 2000;
  for (std::size_t d : {2u, 4u, 8u, 16u}) {
    FlowModel model({d, 1, 1}, {FcLayer{oracle::well_conditioned(d, seed), oracle::well_conditioned(d, seed + 1)},
                                SmoothLeakyRelu{0.3},
                                FcLayer{oracle::well_conditioned(d, seed + 2), oracle::well_conditioned(d, seed + 3)}});
    worst = std::max(worst, fd_worst(model, oracle::gaussian({8, d}, seed + 4), 0.5));
    seed += 5;
    ++cases;
  }
  for (ImageShape s : {ImageShape{1, 4, 4}, ImageShape{2, 2, 4}}) {
    const std::size_t c = s.channels;
    Tensor w1 = oracle::gaussian({c, c, 3, 3}, seed++, 0.15), r1 = oracle::gaussian({c, c, 5, 5}, seed++, 0.15);
    Tensor w2 = oracle::gaussian({c, c, 1, 1}, seed++, 0.15), r2 = oracle::gaussian({c, c, 3, 3}, seed++, 0.15);
    for (std::size_t i = 0; i < c; ++i) {
      w1(i, i, 1, 1) += 1;
      r1(i, i, 2, 2) += 1;
      w2(i, i, 0, 0) += 1;
      r2(i, i, 1, 1) += 1;
    }
    FlowModel model(s, {conv_with(w1, r1, s), SmoothLeakyRelu{0.3}, conv_with(w2, r2, s)});
    worst = std::max(worst, fd_worst(model, oracle::gaussian({4, s.size()}, seed++), 2.0));
    ++cases;
  }
  return {worst <= 1e-5, fmt("%d models (FC D = 2..16, conv D = 16), worst relative error %.2e (bar 1e-5)", cases, worst)};
}

// ---------------------------------------------------------------- 3

Outcome conv_identities() {
  std::mt19937_64 gen(3000);
  const auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
  };
  int configs = 0, flip_ok = 0, m_ok = 0;
  for (int n = 0; n < 30; ++n) {
    const std::size_t c = pick(1, 3), kh = 2 * pick(0, 2) + 1, kw = 2 * pick(0, 2) + 1;
    const std::size_t h = pick(kh, 7), w = pick(kw, 7);
    const Tensor k = oracle::gaussian({c, c, kh, kw}, 3100 + n);

    // Transpose identity under same padding.
    const Tensor t = oracle::probe_conv_matrix(k, c, h, w);
    const Tensor tf = oracle::probe_conv_matrix(flip_kernel(k), c, h, w);
    flip_ok += (tf == oracle::naive_transpose(t));

    // Multiplicity under an arbitrary padding up to k - 1, by labelling taps.
    const std::size_t ph = pick(0, kh - 1), pw = pick(0, kw - 1);
    Tensor labels(k.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) labels.data()[i] = double(i + 1);
    const Tensor lt = oracle::probe_conv_matrix(labels, c, h, w, ph, pw);
    Tensor counts(k.shape());
    for (double v : lt.data())
      if (v != 0.0) counts.data()[static_cast<std::size_t>(v) - 1] += 1.0;
    const ImageShape in{c, h, w}, out{c, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1};
    m_ok += (compute_multiple_m(out, in, k.shape(), {ph, pw}) == counts);
    ++configs;
  }
  const bool pass = configs >= 20 && flip_ok == configs && m_ok == configs;
  return {pass, fmt("%d random configurations: transpose identity %d/%d, multiplicity %d/%d", configs, flip_ok,
                    configs, m_ok, configs)};
}

// ---------------------------------------------------------------- training helpers

struct RunResult {
  std::vector<EpochMetrics> epochs;
  double final_valid_nll = std::nan("");
  RunStatus status = RunStatus::ok;
};

RunResult train_fc2(double lambda, GradMode mode, std::uint64_t seed, std::size_t epochs, std::size_t angle_every) {
  DatasetOptions o;
  o.seed = seed;
  const Dataset ds = load_dataset("two_moons", o);
  Rng rng(seed);
  FlowModel model = build_model(ModelSpec{}, ds.shape, rng);
  TrainConfig c;
  c.lr = 1e-4;
  c.lambda.lambda = lambda;
  c.grad.mode = mode;
  c.seed = seed;
  c.angle_every = angle_every;
  Trainer t(model, c);
  RunResult r;
  for (std::size_t e = 0; e < epochs; ++e) {
    r.epochs.push_back(t.run_epoch(ds.data));
    r.status = r.epochs.back().status;
    if (r.status != RunStatus::ok) break;
  }
  r.final_valid_nll = r.epochs.back().valid_nll;
  return r;
}

// ---------------------------------------------------------------- 4

Outcome angle_reproduction() {
  const RunResult r = train_fc2(1.0, GradMode::snf, 0, 200, 1);
  if (r.status != RunStatus::ok) return {false, "training stopped: " + r.epochs.back().message};
  double tail = 0.0, lo = 1e300;
  for (std::size_t e = 0; e < r.epochs.size(); ++e) {
    if (e + 10 >= r.epochs.size()) tail += r.epochs[e].angle_mean / 10.0;
    lo = std::min(lo, r.epochs[e].angle_mean);
  }
  return {tail < 1.0, fmt("fc2 on two_moons, lambda 1, lr 1e-4, every batch sampled: mean angle over epochs "
                          "191-200 = %.3f deg (bar 1 deg); epoch 1 %.4f deg, epoch 200 %.3f deg, minimum %.4f deg",
                          tail, r.epochs.front().angle_mean, r.epochs.back().angle_mean, lo)};
}

// ---------------------------------------------------------------- 5

Outcome timing_reproduction() {
  const std::vector<std::size_t> dims{64, 128, 256, 512, 1024};
  TimingOptions o;
  o.batch = 128;
  o.n_batches = 5;
  const auto snf = timing_sweep(dims, GradMode::snf, o);
  const auto exact = timing_sweep(dims, GradMode::exact, o);
  const double s_snf = loglog_slope(snf), s_exact = loglog_slope(exact);
  const double t_snf = snf.back().mean_seconds, t_exact = exact.back().mean_seconds;
  const bool pass = s_snf <= 2.4 && s_exact >= 2.6 && t_snf < t_exact;
  return {pass, fmt("slope snf %.2f (bar <= 2.4), slope exact %.2f (bar >= 2.6); at D=1024 snf %.4fs vs exact %.4fs",
                    s_snf, s_exact, t_snf, t_exact)};
}

// ---------------------------------------------------------------- 6

Outcome lambda_behaviour() {
  std::string detail;
  bool pass = true;
  double prev_nll = -1e300;
  for (double lam : {1.0, 10.0, 100.0}) {
    const RunResult r = train_fc2(lam, GradMode::snf, 0, 200, 0);
    const EpochMetrics& last = r.epochs.back();
    const bool stable = r.status == RunStatus::ok && std::isfinite(r.final_valid_nll) && last.recon < 0.1;
    const bool ordered = r.final_valid_nll >= prev_nll;
    pass = pass && stable && ordered;
    detail += fmt("lambda %g: nll %.4f recon %.1e%s%s; ", lam, r.final_valid_nll, last.recon, stable ? "" : " UNSTABLE",
                  ordered ? "" : " (improves on smaller lambda)");
    prev_nll = r.final_valid_nll;
  }
  const RunResult small = train_fc2(0.01, GradMode::snf, 0, 200, 0);
  const bool flagged = small.status != RunStatus::ok;
  pass = pass && flagged;
  detail += fmt("lambda 0.01: %s at epoch %zu", to_string(small.status), small.epochs.back().epoch);
  return {pass, detail};
}

// ---------------------------------------------------------------- 7

Outcome likelihood_parity() {
  double worst = 0.0;
  std::string detail;
  bool ok = true;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const RunResult s = train_fc2(1.0, GradMode::snf, seed, 200, 0);
    const RunResult e = train_fc2(1.0, GradMode::exact, seed, 200, 0);
    ok = ok && s.status == RunStatus::ok && e.status == RunStatus::ok;
    const double gap = std::abs(s.final_valid_nll - e.final_valid_nll);
    worst = std::max(worst, gap);
    detail += fmt("seed %d: snf %.4f exact %.4f; ", int(seed), s.final_valid_nll, e.final_valid_nll);
  }
  return {ok && worst <= 0.1, detail + fmt("worst |difference| %.4f nats (bar 0.1)", worst)};
}

// ---------------------------------------------------------------- 8

Outcome amortized_inference() {
  double worst = 0.0;
  std::uint64_t lu_calls = 0;
  std::size_t examples = 0;
  ModelSpec conv;
  conv.topology = "custom:conv3,slrelu,squeeze,conv3,slrelu,fc";
  conv.init_gain = 0.5;
  ModelSpec fc;
  fc.init_gain = 0.5;
  for (auto [spec, shape] : {std::pair{fc, ImageShape{2, 1, 1}}, std::pair{conv, ImageShape{1, 6, 6}}}) {
    Rng rng(8);
    FlowModel model = build_model(spec, shape, rng);
    const Tensor x = oracle::gaussian({64, shape.size()}, 81);
    const Tensor reference = log_prob_forward(model, x);
    model.amortize_logdets();
    const auto before = lu_factorization_count();
    for (std::size_t n = 0; n < x.rows(); ++n) {
      const Tensor one({1, x.cols()}, std::vector<double>(x.row(n).begin(), x.row(n).end()));
      const double v = log_prob_amortized(model, one)[0];
      worst = std::max(worst, std::abs(v - reference[n]) / std::max(1.0, std::abs(reference[n])));
      ++examples;
    }
    lu_calls += lu_factorization_count() - before;
  }
  return {lu_calls == 0 && worst <= 1e-12,
          fmt("%zu per-example evaluations: %llu LU factorizations, worst deviation from fresh log-dets %.1e "
              "(bar 1e-12)",
              examples, static_cast<unsigned long long>(lu_calls), worst)};
}

// ---------------------------------------------------------------- 9

Outcome sampling_consistency() {
  DatasetOptions o;
  const Dataset ds = load_dataset("two_moons", o);
  Rng rng(0);
  FlowModel model = build_model(ModelSpec{}, ds.shape, rng);
  TrainConfig c;
  c.lr = 1e-3;
  Trainer t(model, c);
  for (int e = 0; e < 30; ++e) t.run_epoch(ds.data);

  const auto gap = [&](FlowModel& m, double* recon) {
    Rng a(9), b(9);
    const Tensor learned = sample(m, 1000, InverseMode::learned, a);
    const Tensor exact = sample(m, 1000, InverseMode::exact, b);
    if (recon) *recon = total_recon(m, exact);
    double sum = 0.0;
    for (std::size_t i = 0; i < learned.rows(); ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < learned.cols(); ++j) d2 += std::pow(learned(i, j) - exact(i, j), 2);
      sum += std::sqrt(d2);
    }
    return sum / static_cast<double>(learned.rows());
  };
  double eps = 0.0;
  const double trained = gap(model, &eps);
  resync_inverse(model);
  const double synced = gap(model, nullptr);
  return {std::isfinite(trained) && synced < 1e-8,
          fmt("trained (recon on samples %.2e): mean L2 gap %.3e; re-synced inverse: mean L2 gap %.1e (bar 1e-8)",
              eps, trained, synced)};
}

// ---------------------------------------------------------------- 10

Outcome determinism_and_persistence() {
  set_thread_count(1);
  DatasetOptions o;
  o.seed = 5;
  const Dataset ds = load_dataset("two_moons", o);
  const auto rows = [&](const std::vector<EpochMetrics>& ms) {
    std::string s;
    for (const auto& m : ms) {
      s += metrics_csv_row(m.epoch, "train", m.nll, m.recon, m.lambda, 0.0, m.angle_mean, m.angle_std) + "\n";
      s += metrics_csv_row(m.epoch, "valid", m.valid_nll, m.valid_recon, m.lambda, 0.0, 0.0, 0.0) + "\n";
    }
    return s;
  };
  TrainConfig c;
  c.lr = 1e-3;
  c.seed = 5;
  c.angle_every = 7;
  std::string runs[2];
  for (auto& out : runs) {
    Rng rng(5);
    FlowModel model = build_model(ModelSpec{}, ds.shape, rng);
    Trainer t(model, c);
    std::vector<EpochMetrics> ms;
    for (int e = 0; e < 10; ++e) ms.push_back(t.run_epoch(ds.data));
    out = rows(ms);
  }
  const bool same_metrics = runs[0] == runs[1];

  // Continue one run in memory and one from a checkpoint on disk.
  const fs::path dir = fs::temp_directory_path() / "snf_acceptance";
  fs::create_directories(dir);
  const std::string path = (dir / "mid.ckpt").string();
  Rng rng(5);
  FlowModel model = build_model(ModelSpec{}, ds.shape, rng);
  Trainer t(model, c);
  for (int e = 0; e < 3; ++e) t.run_epoch(ds.data);
  save_checkpoint(path, make_training_checkpoint(model, t.state()));
  std::vector<double> live, resumed;
  while (live.size() < 100) {
    const auto m = t.run_epoch(ds.data);
    live.insert(live.end(), m.step_losses.begin(), m.step_losses.end());
  }
  const Checkpoint ck = load_checkpoint(path);
  FlowModel back = model_from_checkpoint(ck);
  Trainer tr(back, c, state_from_checkpoint(ck));
  while (resumed.size() < live.size()) {
    const auto m = tr.run_epoch(ds.data);
    resumed.insert(resumed.end(), m.step_losses.begin(), m.step_losses.end());
  }
  fs::remove_all(dir);
  const bool same_losses = live.size() >= 100 && std::memcmp(live.data(), resumed.data(), live.size() * 8) == 0;
  return {same_metrics && same_losses,
          fmt("two seeded runs: metrics %s; resumed checkpoint: %zu step losses %s", same_metrics ? "identical" : "DIFFER",
              live.size(), same_losses ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient equality with an exact inverse", gradient_equality},
      {2, "finite-difference validation", finite_differences},
      {3, "convolution transpose and multiplicity identities", conv_identities},
      {4, "gradient angle below 1 degree", angle_reproduction},
      {5, "timing slopes", timing_reproduction},
      {6, "reconstruction weight behaviour", lambda_behaviour},
      {7, "exact vs self-normalizing likelihood parity", likelihood_parity},
      {8, "amortized inference", amortized_inference},
      {9, "sampling consistency", sampling_consistency},
      {10, "determinism and persistence", determinism_and_persistence},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
