#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "snf/diagnostics.hpp"
#include "snf/linalg.hpp"

#ifdef SNF_WITH_DOWNLOADER
#include "fetch.hpp"
#endif

namespace snf::cli {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  const std::string& t = model.topology;
  if (t != "fc2" && t != "conv9" && t.rfind("custom:", 0) != 0)
    throw ConfigError("unknown model '" + t + "' (expected fc2, conv9 or custom:<layers>)");
  if (t.rfind("custom:", 0) == 0 && t.size() == 7) throw ConfigError("custom model has no layers");
  if (data != "two_moons" && data != "ring" && data != "grid" && data != "grid_of_gaussians" &&
      data.rfind("idx:", 0) != 0 && data.rfind("csv:", 0) != 0)
    throw ConfigError("unknown data '" + data + "' (expected two_moons, ring, grid, idx:<path> or csv:<path>)");
  if (!(model.alpha > 0.0 && model.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (model.inverse_kernel != 0 && model.inverse_kernel % 2 == 0)
    throw ConfigError("asymmetric inverse kernel must be odd");
  if (!(dataset.valid_fraction >= 0.0 && dataset.valid_fraction < 1.0))
    throw ConfigError("valid fraction must lie in [0, 1)");
  if (data.rfind("idx:", 0) != 0 && data.rfind("csv:", 0) != 0 && dataset.synthetic_points < 2)
    throw ConfigError("synthetic datasets need at least two points");
  if (threads == 0) throw ConfigError("threads must be positive");
  if (out_dir.empty()) throw ConfigError("output directory must not be empty");
  train.validate();
}

namespace {

// Flag values that need conversion after parsing.
struct Raw {
  std::string mode = "snf";
  bool geco = false;
  double clip = 0.0;
  std::string probe = "normal";
  std::string angle_scope = "forward";
  bool strict_exact = false;
};

void add_config(CLI::App* sub, std::string& path) {
  sub->add_option("--config", path, "key = value file; command-line flags take precedence");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Fills options not given on the command line from a key = value file.
// Blank lines and lines starting with # or ; are ignored; values may be quoted.
void apply_config_file(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    const std::string where = path + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    if (key == "config") throw ConfigError(where + ": config files cannot include other config files");
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError(where + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void add_run_flags(CLI::App* sub, RunConfig& rc, Raw& raw) {
  sub->add_option("--model", rc.model.topology, "fc2 | conv9 | custom:<fc,slrelu[:a],conv<k>,squeeze,...>")
      ->capture_default_str();
  sub->add_option("--data", rc.data, "two_moons | ring | grid | idx:<path> | csv:<path>")->capture_default_str();
  sub->add_option("--mode", raw.mode, "gradient mode")
      ->check(CLI::IsMember({"exact", "snf"}))
      ->capture_default_str();
  sub->add_option("--lambda", rc.train.lambda.lambda, "reconstruction weight (initial value under --geco)")
      ->capture_default_str();
  sub->add_flag("--geco", raw.geco, "adapt lambda towards the reconstruction tolerance");
  sub->add_option("--geco-tolerance", rc.train.lambda.tolerance, "target reconstruction error")
      ->capture_default_str();
  sub->add_option("--geco-gain", rc.train.lambda.gain, "multiplicative update gain")->capture_default_str();
  sub->add_option("--geco-decay", rc.train.lambda.decay, "moving-average decay")->capture_default_str();
  sub->add_option("--lambda-min", rc.train.lambda.lambda_min, "lower bound for adaptive lambda")
      ->capture_default_str();
  sub->add_option("--lambda-max", rc.train.lambda.lambda_max, "upper bound for adaptive lambda")
      ->capture_default_str();
  sub->add_option("--epochs", rc.train.epochs, "training epochs")->capture_default_str();
  sub->add_option("--batch", rc.train.batch, "batch size")->capture_default_str();
  sub->add_option("--lr", rc.train.lr, "Adam learning rate")->capture_default_str();
  sub->add_option("--warmup", rc.train.warmup_epochs, "linear learning-rate warm-up, in epochs")
      ->capture_default_str();
  sub->add_option("--clip", raw.clip, "global gradient-norm bound (default: no clipping)");
  sub->add_option("--seed", rc.train.seed, "seed for data, initialization and batching")->capture_default_str();
  sub->add_option("--threads", rc.threads, "matrix-product worker threads")->capture_default_str();
  sub->add_option("--out", rc.out_dir, "output directory")->capture_default_str();
  sub->add_option("--asym-kernel", rc.model.inverse_kernel, "inverse kernel extent for convolutions (0: same as w)")
      ->capture_default_str();
  sub->add_option("--jvp-penalty", rc.train.grad.jvp_weight, "weight of the Jacobian-vector-product penalty")
      ->capture_default_str();
  sub->add_option("--jvp-probes", rc.train.grad.jvp_probes, "probe vectors per batch")->capture_default_str();
  sub->add_option("--probe", raw.probe, "probe distribution")
      ->check(CLI::IsMember({"normal", "rademacher"}))
      ->capture_default_str();
  sub->add_flag("--strict-exact", raw.strict_exact, "exact conv gradients also propagate through T(r)^-1");
  sub->add_option("--alpha", rc.model.alpha, "smooth leaky ReLU slope")->capture_default_str();
  sub->add_option("--init-gain", rc.model.init_gain, "initial noise gain around the identity")
      ->capture_default_str();
  sub->add_option("--points", rc.dataset.synthetic_points, "synthetic dataset size")->capture_default_str();
  sub->add_option("--valid-fraction", rc.dataset.valid_fraction, "held-out fraction for synthetic and CSV data")
      ->capture_default_str();
  sub->add_option("--idx-valid", rc.dataset.idx_valid, "trailing IDX images held out")->capture_default_str();
  sub->add_option("--recon-limit", rc.train.recon_limit, "epoch reconstruction error that flags instability")
      ->capture_default_str();
  sub->add_option("--angle-scope", raw.angle_scope, "parameters entering the angle diagnostic")
      ->check(CLI::IsMember({"forward", "both"}))
      ->capture_default_str();
}

void finish_run_config(RunConfig& rc, const Raw& raw, const CLI::App* sub) {
  rc.train.grad.mode = parse_grad_mode(raw.mode);
  rc.train.lambda.mode = raw.geco ? LambdaController::Mode::geco : LambdaController::Mode::fixed;
  if (sub->get_option("--clip")->count() > 0) rc.train.clip = raw.clip;
  rc.train.grad.probe = parse_probe_distribution(raw.probe);
  rc.train.grad.strict_exact = raw.strict_exact;
  rc.train.angle_scope = parse_angle_scope(raw.angle_scope);
  rc.dataset.seed = rc.train.seed;
  rc.validate();
}

std::map<std::string, std::string> run_header(const RunConfig& rc, const Dataset& ds) {
  const PreprocessSpec& p = ds.data.preprocess;
  return {
      {"data", rc.data},
      {"data.seed", std::to_string(rc.dataset.seed)},
      {"data.points", std::to_string(rc.dataset.synthetic_points)},
      {"data.valid_fraction", encode_double(rc.dataset.valid_fraction)},
      {"data.idx_valid", std::to_string(rc.dataset.idx_valid)},
      {"data.pixels", ds.data.pixels ? "1" : "0"},
      {"preprocess.dequantize", p.dequantize ? "1" : "0"},
      {"preprocess.scale", encode_double(p.scale)},
      {"preprocess.shrink", encode_double(p.shrink)},
      {"train.mode", to_string(rc.train.grad.mode)},
      {"train.seed", std::to_string(rc.train.seed)},
  };
}

std::string header_or(const Checkpoint& ck, const std::string& key, const std::string& fallback) {
  const auto it = ck.header.find(key);
  return it == ck.header.end() ? fallback : it->second;
}

std::uint64_t to_u64(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(std::string("checkpoint field ") + what + " is not an integer: '" + s + "'");
  }
}

/// Rebuilds the dataset a checkpoint was trained on; `data` overrides the stored spec.
Dataset dataset_for(const Checkpoint& ck, const std::string& data) {
  DatasetOptions o;
  o.seed = to_u64(header_or(ck, "data.seed", "0"), "data.seed");
  o.synthetic_points = to_u64(header_or(ck, "data.points", std::to_string(o.synthetic_points)), "data.points");
  o.idx_valid = to_u64(header_or(ck, "data.idx_valid", std::to_string(o.idx_valid)), "data.idx_valid");
  if (ck.header.count("data.valid_fraction")) o.valid_fraction = decode_double(ck.value("data.valid_fraction"));
  if (ck.header.count("preprocess.scale")) {
    o.preprocess.dequantize = ck.value("preprocess.dequantize") == "1";
    o.preprocess.scale = decode_double(ck.value("preprocess.scale"));
    o.preprocess.shrink = decode_double(ck.value("preprocess.shrink"));
  }
  const std::string spec = data.empty() ? header_or(ck, "data", "") : data;
  if (spec.empty()) throw ConfigError("checkpoint does not record its dataset; pass --data");
  return load_dataset(spec, o);
}

PreprocessSpec preprocess_for(const Checkpoint& ck) {
  PreprocessSpec p;
  if (ck.header.count("preprocess.scale")) {
    p.dequantize = ck.value("preprocess.dequantize") == "1";
    p.scale = decode_double(ck.value("preprocess.scale"));
    p.shrink = decode_double(ck.value("preprocess.shrink"));
  }
  return p;
}

// Full resolved configuration, replayable with --config; unset options are omitted.
std::string replay_config(const CLI::App* sub) {
  std::istringstream in(sub->config_to_str(true, false));
  std::string line, text;
  while (std::getline(in, line)) {
    if (line.rfind("config=", 0) == 0) continue;
    if (line.size() < 3 || line.compare(line.size() - 3, 3, "=\"\"") != 0) text += line + '\n';
  }
  return text;
}

std::ofstream open_csv(const fs::path& path, bool append, const std::string& header) {
  const bool fresh = !append || !fs::exists(path);
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw ConfigError("cannot write " + path.string());
  if (fresh) out << header << '\n';
  return out;
}

void log_epoch(std::ostream& err, const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "epoch %zu  nll %.6f  valid %.6f  recon %.3e  lambda %.4g  %.2fs", m.epoch, m.nll,
                m.valid_nll, m.recon, m.lambda, m.seconds);
  err << buf;
  if (!m.angles.empty()) {
    std::snprintf(buf, sizeof buf, "  angle %.4f +- %.4f deg", m.angle_mean, m.angle_std);
    err << buf;
  }
  err << '\n';
}

// ---------------------------------------------------------------- commands

int cmd_train(const RunConfig& rc, const std::string& config_text, std::ostream& out, std::ostream& err) {
  set_thread_count(rc.threads);
  const Dataset ds = load_dataset(rc.data, rc.dataset);
  FlowModel model;
  TrainState state;
  const bool resuming = !rc.resume.empty();
  if (resuming) {
    const Checkpoint ck = load_checkpoint(rc.resume);
    model = model_from_checkpoint(ck);
    state = state_from_checkpoint(ck);
    if (model.input_shape() != ds.shape) throw ConfigError("checkpoint model does not match the dataset geometry");
    err << "resuming from " << rc.resume << " at epoch " << state.epoch << '\n';
  } else {
    Rng init(rc.train.seed);
    model = build_model(rc.model, ds.shape, init);
  }
  Trainer trainer = resuming ? Trainer(model, rc.train, std::move(state)) : Trainer(model, rc.train);

  const fs::path dir(rc.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << config_text;
  }
  auto metrics = open_csv(dir / "metrics.csv", resuming, metrics_csv_header());
  auto valid = open_csv(dir / "validation.csv", resuming, metrics_csv_header());
  const auto header = run_header(rc, ds);
  err << "training " << model.topology() << " (D = " << model.dim() << ", " << model.size() << " layers) on "
      << rc.data << ": " << ds.data.train.rows() << " train / " << ds.data.valid.rows() << " valid rows, mode "
      << to_string(rc.train.grad.mode) << '\n';

  bool saved_best = false;
  while (trainer.state().epoch < rc.train.epochs) {
    const EpochMetrics m = trainer.run_epoch(ds.data);
    metrics << metrics_csv_row(m.epoch, "train", m.nll, m.recon, m.lambda, m.seconds, m.angle_mean, m.angle_std)
            << '\n';
    valid << metrics_csv_row(m.epoch, "valid", m.valid_nll, m.valid_recon, m.lambda, m.seconds,
                             std::nan(""), std::nan(""))
          << '\n';
    metrics.flush();
    valid.flush();
    log_epoch(err, m);
    if (m.status != RunStatus::ok) {
      err << "error: training " << to_string(m.status) << " at epoch " << m.epoch << ": " << m.message << '\n';
      return kExitNumerical;
    }
    if (trainer.state().best_epoch == m.epoch) {
      save_checkpoint((dir / "best.ckpt").string(), make_training_checkpoint(model, trainer.state(), header));
      saved_best = true;
    }
  }
  const Checkpoint final_ck = make_training_checkpoint(model, trainer.state(), header);
  save_checkpoint((dir / "final.ckpt").string(), final_ck);
  if (!saved_best && !fs::exists(dir / "best.ckpt")) save_checkpoint((dir / "best.ckpt").string(), final_ck);

  const TrainState& st = trainer.state();
  char buf[256];
  std::snprintf(buf, sizeof buf, "epochs %zu\nsteps %llu\nbest_epoch %zu\nbest_valid_nll %.17g\n", st.epoch,
                static_cast<unsigned long long>(st.step), st.best_epoch, st.best_valid_nll);
  out << buf;
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "valid";
  double perturb = 0.0;
  std::size_t repeat = 1;
  std::size_t threads = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  using Clock = std::chrono::steady_clock;
  set_thread_count(a.threads);
  if (a.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  FlowModel model = model_from_checkpoint(ck);
  const Dataset ds = dataset_for(ck, a.data);
  if (model.input_shape() != ds.shape) throw ConfigError("checkpoint model does not match the dataset geometry");
  const Tensor& rows = a.split == "train" ? ds.data.train : ds.data.valid;
  if (rows.rows() == 0) throw ConfigError("the " + a.split + " split is empty");

  TrainConfig tc;
  tc.seed = to_u64(header_or(ck, "train.seed", "0"), "train.seed");
  Trainer evaluator(model, tc);
  const std::size_t passes = std::max<std::size_t>(a.repeat, a.perturb != 0.0 ? 2 : 1);
  double nll = 0.0;
  for (std::size_t p = 0; p < passes; ++p) {
    if (p == 1 && a.perturb != 0.0) {
      const auto lin = model.linear_layers();
      if (lin.empty()) throw ConfigError("model has no parameters to perturb");
      Layer& layer = model.mutable_layer(lin.front());
      if (auto* f = std::get_if<FcLayer>(&layer)) f->weight[0] += a.perturb;
      else std::get<ConvLayer>(layer).kernel[0] += a.perturb;
      err << "perturbed layer " << lin.front() << " parameter 0 by " << a.perturb << '\n';
    }
    const AmortizedStats before = model.amortized_stats();
    const std::uint64_t lu0 = lu_factorization_count();
    const auto t0 = Clock::now();
    nll = evaluator.evaluate_nll(rows, ds.data);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    const AmortizedStats& after = model.amortized_stats();
    char buf[256];
    std::snprintf(buf, sizeof buf, "eval pass %zu: %.4fs, log-det cache %s (%llu LU factorizations)\n", p + 1, dt,
                  after.recomputes > before.recomputes ? "recomputed" : "reused",
                  static_cast<unsigned long long>(lu_factorization_count() - lu0));
    err << buf;
  }
  const double D = static_cast<double>(model.dim());
  char buf[256];
  std::snprintf(buf, sizeof buf, "split %s\nexamples %zu\nnll_nats %.17g\nnats_per_dim %.17g\nbits_per_dim %.17g\n",
                a.split.c_str(), rows.rows(), nll, nll / D, nll / (D * std::log(2.0)));
  out << buf;
  return kExitOk;
}

struct SampleArgs {
  std::string checkpoint;
  std::size_t n = 64;
  std::string inverse = "both";
  std::uint64_t seed = 0;
  std::string out_dir = "samples";
  std::size_t threads = 1;
};

void write_points_csv(const fs::path& path, const Tensor& x) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.precision(17);
  for (std::size_t j = 0; j < x.cols(); ++j) out << (j ? "," : "") << 'x' << j;
  out << '\n';
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out << (j ? "," : "") << x(i, j);
    out << '\n';
  }
}

// Tiles images into a near-square grid; channels are averaged to grey.
void write_pgm_grid(const fs::path& path, const Tensor& pixels, ImageShape s) {
  const std::size_t n = pixels.rows();
  const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(double(n)))));
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t W = cols * s.width, H = rows * s.height;
  std::vector<unsigned char> img(W * H, 0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t oy = (k / cols) * s.height, ox = (k % cols) * s.width;
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        double v = 0.0;
        for (std::size_t c = 0; c < s.channels; ++c) v += pixels(k, (c * s.height + y) * s.width + x);
        v = std::floor(v / static_cast<double>(s.channels));
        img[(oy + y) * W + ox + x] = static_cast<unsigned char>(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 255.0));
      }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "P5\n" << W << ' ' << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
  set_thread_count(a.threads);
  if (a.checkpoint.empty()) throw ConfigError("sample needs --checkpoint");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const FlowModel model = model_from_checkpoint(ck);
  const bool pixels = header_or(ck, "data.pixels", "0") == "1";
  const PreprocessSpec pre = preprocess_for(ck);
  const ImageShape s = model.input_shape();
  const bool points = s.height == 1 && s.width == 1;
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);

  std::vector<InverseMode> modes;
  if (a.inverse == "both") modes = {InverseMode::learned, InverseMode::exact};
  else modes = {parse_inverse_mode(a.inverse)};
  std::vector<Tensor> drawn;
  for (InverseMode m : modes) {
    Rng rng(a.seed);  // same base draws for every mode
    Tensor x = sample(model, a.n, m, rng);
    const std::string name = m == InverseMode::learned ? "learned" : "exact";
    if (points) {
      write_points_csv(dir / ("samples_" + name + ".csv"), x);
    } else {
      const Tensor px = pixels ? deprocess(pre, x) : x;
      write_pgm_grid(dir / ("samples_" + name + ".pgm"), px, s);
    }
    err << "wrote " << a.n << ' ' << name << "-inverse samples to " << dir.string() << '\n';
    drawn.push_back(std::move(x));
  }
  out.precision(17);
  out << "samples " << a.n << '\n';
  if (drawn.size() == 2) {
    double sum = 0.0, worst = 0.0;
    for (std::size_t i = 0; i < a.n; ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < drawn[0].cols(); ++j) {
        const double d = drawn[0](i, j) - drawn[1](i, j);
        d2 += d * d;
      }
      sum += std::sqrt(d2);
      worst = std::max(worst, std::sqrt(d2));
    }
    out << "l2_gap_mean " << (a.n ? sum / static_cast<double>(a.n) : 0.0) << '\n';
    out << "l2_gap_max " << worst << '\n';
    out << "recon_on_samples " << total_recon(model, drawn[1]) << '\n';
  }
  return kExitOk;
}

struct BenchArgs {
  std::vector<std::size_t> dims{64, 128, 256, 512, 1024};
  std::vector<std::string> modes{"snf", "exact"};
  TimingOptions timing;
  std::string out_dir = "bench";
  std::size_t threads = 1;
};

int cmd_bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
  if (a.dims.size() < 2) throw ConfigError("bench needs at least two dimensions");
  if (std::any_of(a.dims.begin(), a.dims.end(), [](std::size_t d) { return d == 0; }))
    throw ConfigError("dimensions must be positive");
  set_thread_count(a.threads);
  std::vector<TimingRecord> all;
  out.precision(6);
  for (const std::string& name : a.modes) {
    const GradMode mode = parse_grad_mode(name);
    const auto recs = timing_sweep(a.dims, mode, a.timing);
    for (const auto& r : recs) err << "D " << r.dim << ' ' << name << ' ' << r.mean_seconds << "s\n";
    out << "slope " << name << ' ' << loglog_slope(recs) << '\n';
    all.insert(all.end(), recs.begin(), recs.end());
  }
  fs::create_directories(a.out_dir);
  write_timing_csv((fs::path(a.out_dir) / "timing.csv").string(), all);
  return kExitOk;
}

int cmd_diag_angle(RunConfig rc, std::size_t every, std::ostream& out, std::ostream& err) {
  set_thread_count(rc.threads);
  const Dataset ds = load_dataset(rc.data, rc.dataset);
  Rng init(rc.train.seed);
  FlowModel model = build_model(rc.model, ds.shape, init);
  rc.train.angle_every = every;
  const auto recs = angle_sweep(model, ds.data, rc.train, rc.train.epochs);
  fs::create_directories(rc.out_dir);
  write_angles_csv((fs::path(rc.out_dir) / "angles.csv").string(), recs);
  char buf[128];
  for (const auto& r : recs) {
    std::snprintf(buf, sizeof buf, "epoch %zu  angle %.6f +- %.6f deg  global %.6f\n", r.epoch, r.mean, r.std,
                  r.global);
    out << buf;
  }
  err << "wrote " << (fs::path(rc.out_dir) / "angles.csv").string() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-normalizing flows: training, evaluation, sampling and diagnostics", "snf"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "snf 1.0");

  RunConfig train_rc;
  Raw train_raw;
  CLI::App* train = app.add_subcommand("train", "train a flow; writes metrics, validation rows and checkpoints");
  std::string train_config;
  add_config(train, train_config);
  add_run_flags(train, train_rc, train_raw);
  train->add_option("--angle-every", train_rc.train.angle_every, "record gradient angles every n-th batch (0: off)")
      ->capture_default_str();
  train->add_flag("--resync-inverse", train_rc.train.resync_inverse, "set R = W^-1 before every step (diagnostic)");
  train->add_option("--resume", train_rc.resume, "continue from a checkpoint");

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "exact NLL of a checkpoint using amortized log-determinants");
  std::string eval_config;
  add_config(eval, eval_config);
  eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint to evaluate (required)");
  eval->add_option("--data", eval_args.data, "dataset override (default: the one recorded in the checkpoint)");
  eval->add_option("--split", eval_args.split, "split to evaluate")
      ->check(CLI::IsMember({"train", "valid"}))
      ->capture_default_str();
  eval->add_option("--perturb", eval_args.perturb, "after one pass, add this to one parameter and evaluate again");
  eval->add_option("--repeat", eval_args.repeat, "evaluation passes")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--threads", eval_args.threads, "matrix-product worker threads")->capture_default_str();

  SampleArgs sample_args;
  CLI::App* samp = app.add_subcommand("sample", "draw samples through the learned and/or exact inverse");
  std::string samp_config;
  add_config(samp, samp_config);
  samp->add_option("--checkpoint", sample_args.checkpoint, "checkpoint to sample from (required)");
  samp->add_option("--n", sample_args.n, "number of samples")->capture_default_str();
  samp->add_option("--inverse", sample_args.inverse, "inverse used for sampling")
      ->check(CLI::IsMember({"learned", "exact", "both"}))
      ->capture_default_str();
  samp->add_option("--seed", sample_args.seed, "seed for the base samples")->capture_default_str();
  samp->add_option("--out", sample_args.out_dir, "output directory")->capture_default_str();
  samp->add_option("--threads", sample_args.threads, "matrix-product worker threads")->capture_default_str();

  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench", "time one training step of a single FC layer against D");
  std::string bench_config;
  add_config(bench, bench_config);
  bench->add_option("--dims", bench_args.dims, "dimensions")->delimiter(',')->capture_default_str();
  bench->add_option("--modes", bench_args.modes, "gradient modes")
      ->delimiter(',')
      ->check(CLI::IsMember({"exact", "snf"}))
      ->capture_default_str();
  bench->add_option("--batch", bench_args.timing.batch, "batch size")->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--n-batches", bench_args.timing.n_batches, "timed batches per dimension")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--warmup-batches", bench_args.timing.warmup_batches, "untimed batches per dimension")
      ->capture_default_str();
  bench->add_option("--seed", bench_args.timing.seed, "seed")->capture_default_str();
  bench->add_option("--out", bench_args.out_dir, "output directory")->capture_default_str();
  bench->add_option("--threads", bench_args.threads, "matrix-product worker threads")->capture_default_str();

  RunConfig angle_rc;
  Raw angle_raw;
  std::size_t angle_every = kDefaultAngleEvery;
  CLI::App* angle = app.add_subcommand("diag-angle", "train in snf mode and record angles to exact gradients");
  std::string angle_config;
  add_config(angle, angle_config);
  add_run_flags(angle, angle_rc, angle_raw);
  angle->add_option("--every", angle_every, "sample angles every n-th batch")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

#ifdef SNF_WITH_DOWNLOADER
  FetchArgs fetch_args;
  CLI::App* fetch = app.add_subcommand("fetch-mnist", "download the MNIST IDX files (gzip, readable as idx:<path>)");
  fetch->add_option("--out", fetch_args.out_dir, "output directory")->capture_default_str();
  fetch->add_option("--url", fetch_args.base_url, "mirror base URL")->capture_default_str();
#endif

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (auto [sub, path] : {std::pair{train, &train_config}, {eval, &eval_config}, {samp, &samp_config},
                             {bench, &bench_config}, {angle, &angle_config}})
      if (sub->parsed()) apply_config_file(sub, *path);
    if (train->parsed()) {
      finish_run_config(train_rc, train_raw, train);
      return cmd_train(train_rc, replay_config(train), out, err);
    }
    if (eval->parsed()) return cmd_eval(eval_args, out, err);
    if (samp->parsed()) return cmd_sample(sample_args, out, err);
    if (bench->parsed()) return cmd_bench(bench_args, out, err);
    if (angle->parsed()) {
      finish_run_config(angle_rc, angle_raw, angle);
      return cmd_diag_angle(angle_rc, angle_every, out, err);
    }
#ifdef SNF_WITH_DOWNLOADER
    if (fetch->parsed()) return fetch_mnist(fetch_args, out, err);
#endif
  } catch (const Divergence& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const SingularMatrix& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const NoConvergence& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace snf::cli
