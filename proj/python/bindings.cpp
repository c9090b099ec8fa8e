#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>

#include "snf/data_io.hpp"
#include "snf/diagnostics.hpp"

namespace py = pybind11;
using namespace snf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

/// Accepts [N, D] or a single row [D].
Tensor to_batch(const Array& a, std::size_t dim) {
  Tensor t = to_tensor(a);
  if (t.rank() == 1) t = t.reshaped({1, t.size()});
  if (t.rank() != 2) t = t.reshaped({t.dim(0), t.size() / std::max<std::size_t>(t.dim(0), 1)});
  if (t.cols() != dim) throw ShapeError("expected rows of length " + std::to_string(dim));
  return t;
}

ImageShape to_shape(const std::vector<std::size_t>& s) {
  if (s.size() == 1) return {s[0], 1, 1};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ShapeError("input shape must be (D,) or (C, H, W)");
}

py::tuple shape_tuple(ImageShape s) { return py::make_tuple(s.channels, s.height, s.width); }

py::dict param_grad_dict(const ParamGrad& g) {
  py::dict d;
  d["loglik"] = to_array(g.loglik);
  d["logdet"] = to_array(g.logdet);
  d["recon"] = to_array(g.recon);
  if (!g.jvp.empty()) d["jvp"] = to_array(g.jvp);
  return d;
}

py::dict epoch_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["nll"] = m.nll;
  d["recon"] = m.recon;
  d["lambda"] = m.lambda;
  d["seconds"] = m.seconds;
  d["angle_mean"] = m.angle_mean;
  d["angle_std"] = m.angle_std;
  d["angle_global"] = m.angle_global;
  d["valid_nll"] = m.valid_nll;
  d["valid_recon"] = m.valid_recon;
  d["step_losses"] = m.step_losses;
  d["status"] = to_string(m.status);
  d["message"] = m.message;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Self-normalizing flows with learned inverse weights";

  py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", m.attr("Error"));
  py::register_exception<SingularMatrix>(m, "SingularMatrix", m.attr("Error"));
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("Error"));
  py::register_exception<FormatError>(m, "FormatError", m.attr("Error"));
  py::register_exception<Divergence>(m, "Divergence", m.attr("Error"));
  py::register_exception<NoConvergence>(m, "NoConvergence", m.attr("Error"));
  py::register_exception<DegenerateInput>(m, "DegenerateInput", m.attr("Error"));

  // Linear algebra and convolution primitives.
  m.def("logabsdet", [](const Array& a) {
    const LogAbsDet r = logabsdet(lu_factor(to_tensor(a)));
    return py::make_tuple(r.sign, r.logabs);
  }, "Sign and log|det| through LU with partial pivoting.");
  m.def("solve", [](const Array& a, const Array& b) { return to_array(solve(lu_factor(to_tensor(a)), to_tensor(b))); });
  m.def("matmul", [](const Array& a, const Array& b) { return to_array(matmul(to_tensor(a), to_tensor(b))); });
  m.def("lu_factorization_count", &lu_factorization_count);
  m.def("set_thread_count", &set_thread_count);
  m.def("thread_count", &thread_count);
  m.def("conv2d", [](const Array& x, const Array& k) { return to_array(conv2d(to_tensor(x), to_tensor(k))); },
        "Same-padding cross-correlation of one [C, H, W] image.");
  m.def("flip_kernel", [](const Array& k) { return to_array(flip_kernel(to_tensor(k))); });
  m.def("conv_matrix", [](const Array& k, std::vector<std::size_t> in) {
    const Tensor kt = to_tensor(k);
    return to_array(build_conv_matrix(kt, to_shape(in), same_padding(kt)));
  }, py::arg("kernel"), py::arg("input_shape"));
  m.def("compute_multiple_m", [](std::vector<std::size_t> kernel_shape, std::vector<std::size_t> in) {
    if (kernel_shape.size() != 4) throw ShapeError("kernel shape must have four extents");
    const ImageShape s = to_shape(in);
    const Padding pad = same_padding(kernel_shape[2], kernel_shape[3]);
    const ImageShape out = conv_output_shape(s, kernel_shape, pad);
    return to_array(compute_multiple_m(out, s, kernel_shape, pad));
  }, py::arg("kernel_shape"), py::arg("input_shape"));

  m.def("slrelu", [](const Array& x, double alpha) {
    return to_array(slrelu_forward(SmoothLeakyRelu{alpha}, to_tensor(x)).y);
  }, py::arg("x"), py::arg("alpha") = 0.3);
  m.def("slrelu_inverse", [](const Array& y, double alpha) {
    return to_array(slrelu_inverse(SmoothLeakyRelu{alpha}, to_tensor(y)));
  }, py::arg("y"), py::arg("alpha") = 0.3);

  m.def("gradient_angle", [](const Array& a, const Array& b) {
    return gradient_angle(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
  }, "Angle in degrees between two flattened gradients.");

  // Data.
  m.def("synthetic_2d", [](const std::string& name, std::size_t n, std::uint64_t seed) {
    return to_array(synthetic_2d(name, n, seed));
  }, py::arg("name"), py::arg("n"), py::arg("seed") = 0);
  m.def("load_idx", [](const std::string& path) { return to_array(load_idx(path)); });
  m.def("load_csv_points", [](const std::string& path) { return to_array(load_csv_points(path)); });

  // Models.
  py::class_<FlowModel>(m, "FlowModel")
      .def_property_readonly("dim", &FlowModel::dim)
      .def_property_readonly("input_shape", [](const FlowModel& f) { return shape_tuple(f.input_shape()); })
      .def_property_readonly("topology", &FlowModel::topology)
      .def("__len__", &FlowModel::size)
      .def("layer_kinds", [](const FlowModel& f) {
        std::vector<std::string> out;
        for (const Layer& l : f.layers()) {
          out.push_back(std::visit([](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, FcLayer>) return "fc";
            else if constexpr (std::is_same_v<T, ConvLayer>) return "conv";
            else if constexpr (std::is_same_v<T, SmoothLeakyRelu>) return "slrelu";
            else return "squeeze";
          }, l));
        }
        return out;
      })
      .def("parameters", [](const FlowModel& f) {
        std::vector<Array> out;
        for (const Tensor* p : f.parameters()) out.push_back(to_array(*p));
        return out;
      }, "Copies of the parameters: forward then inverse, layer by layer.")
      .def("set_parameters", [](FlowModel& f, const std::vector<Array>& values) {
        auto ps = f.parameters();
        if (values.size() != ps.size()) throw ShapeError("parameter count mismatch");
        for (std::size_t i = 0; i < ps.size(); ++i) {
          Tensor t = to_tensor(values[i]);
          if (t.shape() != ps[i]->shape()) throw ShapeError("parameter " + std::to_string(i) + " has the wrong shape");
          *ps[i] = std::move(t);
        }
      })
      .def("forward", [](FlowModel& f, const Array& x) {
        return to_array(f.forward(to_batch(x, f.dim())).activations.back());
      }, "Maps data rows to base space.")
      .def("inverse", [](const FlowModel& f, const Array& z, const std::string& mode) {
        return to_array(f.inverse(to_batch(z, f.dim()), parse_inverse_mode(mode)));
      }, py::arg("z"), py::arg("mode") = "exact")
      .def("log_prob", [](FlowModel& f, const Array& x, bool amortized) {
        const Tensor b = to_batch(x, f.dim());
        return to_array(amortized ? log_prob_amortized(f, b) : log_prob_forward(f, b));
      }, py::arg("x"), py::arg("amortized") = false)
      .def("log_prob_inverse_model", [](const FlowModel& f, const Array& x) {
        return to_array(log_prob_inverse_model(f, to_batch(x, f.dim())));
      })
      .def("amortize_logdets", &FlowModel::amortize_logdets)
      .def("cache_fresh", &FlowModel::cache_fresh)
      .def("amortized_stats", [](const FlowModel& f) {
        return py::make_tuple(f.amortized_stats().hits, f.amortized_stats().recomputes);
      }, "(hits, recomputes) of the log-det cache.")
      .def("total_recon", [](const FlowModel& f, const Array& x) { return total_recon(f, to_batch(x, f.dim())); })
      .def("mixture_objective", [](const FlowModel& f, const Array& x, double lambda) {
        const MixtureValue v = mixture_objective(f, to_batch(x, f.dim()), lambda);
        py::dict d;
        d["log_prob_f"] = v.log_prob_f;
        d["log_prob_g"] = v.log_prob_g;
        d["recon"] = v.recon;
        d["objective"] = v.objective;
        return d;
      }, py::arg("x"), py::arg("lam") = 1.0)
      .def("gradients", [](const FlowModel& f, const Array& x, const std::string& mode, double lambda,
                           bool strict_exact) {
        GradOptions o;
        o.mode = parse_grad_mode(mode);
        o.lambda = lambda;
        o.strict_exact = strict_exact;
        const BatchGradients g = compute_gradients(f, to_batch(x, f.dim()), o);
        py::dict d;
        std::vector<Array> totals;
        for (const Tensor& t : g.report.totals()) totals.push_back(to_array(t));
        d["totals"] = totals;
        py::list layers;
        for (const LayerGrad& lg : g.report.layers) {
          py::dict l;
          l["layer"] = lg.layer_index;
          l["forward"] = param_grad_dict(lg.forward);
          l["inverse"] = param_grad_dict(lg.inverse);
          l["recon"] = lg.recon;
          layers.append(l);
        }
        d["layers"] = layers;
        d["log_prob_f"] = g.log_prob_f;
        d["log_prob_g"] = g.log_prob_g;
        d["recon"] = g.recon;
        d["objective"] = g.objective;
        return d;
      }, py::arg("x"), py::arg("mode") = "snf", py::arg("lam") = 1.0, py::arg("strict_exact") = false,
         "Ascent directions of the mixture objective, averaged over the batch.")
      .def("sample", [](const FlowModel& f, std::size_t n, const std::string& mode, std::uint64_t seed) {
        Rng rng(seed);
        return to_array(sample(f, n, parse_inverse_mode(mode), rng));
      }, py::arg("n"), py::arg("mode") = "exact", py::arg("seed") = 0)
      .def("resync_inverse", [](FlowModel& f) { resync_inverse(f); });

  m.def("build_model", [](const std::string& topology, std::vector<std::size_t> input_shape, std::uint64_t seed,
                          double alpha, std::size_t inverse_kernel, double init_gain) {
    ModelSpec s;
    s.topology = topology;
    s.alpha = alpha;
    s.inverse_kernel = inverse_kernel;
    s.init_gain = init_gain;
    Rng rng(seed);
    return build_model(s, to_shape(input_shape), rng);
  }, py::arg("topology"), py::arg("input_shape"), py::arg("seed") = 0, py::arg("alpha") = 0.3,
     py::arg("inverse_kernel") = 0, py::arg("init_gain") = 0.01);

  m.def("save_model", [](const std::string& path, const FlowModel& f) {
    save_checkpoint(path, make_training_checkpoint(f, TrainState{}));
  });
  m.def("load_model", [](const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); });

  // Training.
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("warmup_epochs", &TrainConfig::warmup_epochs)
      .def_readwrite("clip", &TrainConfig::clip)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("angle_every", &TrainConfig::angle_every)
      .def_readwrite("recon_limit", &TrainConfig::recon_limit)
      .def_readwrite("resync_inverse", &TrainConfig::resync_inverse)
      .def_property("mode", [](const TrainConfig& c) { return std::string(to_string(c.grad.mode)); },
                    [](TrainConfig& c, const std::string& s) { c.grad.mode = parse_grad_mode(s); })
      .def_property("lam", [](const TrainConfig& c) { return c.lambda.lambda; },
                    [](TrainConfig& c, double v) { c.lambda.lambda = v; })
      .def_property("geco", [](const TrainConfig& c) { return c.lambda.mode == LambdaController::Mode::geco; },
                    [](TrainConfig& c, bool on) {
                      c.lambda.mode = on ? LambdaController::Mode::geco : LambdaController::Mode::fixed;
                    })
      .def_property("jvp_penalty", [](const TrainConfig& c) { return c.grad.jvp_weight; },
                    [](TrainConfig& c, double v) { c.grad.jvp_weight = v; });

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](FlowModel& model, const TrainConfig& config) { return new Trainer(model, config); }),
           py::keep_alive<1, 2>())
      .def("run_epoch", [](Trainer& t, const Array& train, const Array& valid) {
        TrainData d;
        d.train = to_batch(train, t.model().dim());
        d.valid = valid.size() ? to_batch(valid, t.model().dim()) : Tensor({0, t.model().dim()});
        return epoch_dict(t.run_epoch(d));
      }, py::arg("train"), py::arg("valid"))
      .def("evaluate_nll", [](Trainer& t, const Array& x) {
        return t.evaluate_nll(to_batch(x, t.model().dim()), TrainData{});
      })
      .def_property_readonly("epoch", [](const Trainer& t) { return t.state().epoch; })
      .def_property_readonly("step", [](const Trainer& t) { return t.state().step; })
      .def_property_readonly("lam", [](const Trainer& t) { return t.state().lambda.lambda; });

  m.def("timing_sweep", [](std::vector<std::size_t> dims, const std::string& mode, std::size_t batch,
                           std::size_t n_batches, std::uint64_t seed) {
    TimingOptions o;
    o.batch = batch;
    o.n_batches = n_batches;
    o.seed = seed;
    const auto recs = timing_sweep(dims, parse_grad_mode(mode), o);
    std::vector<double> means;
    for (const auto& r : recs) means.push_back(r.mean_seconds);
    return py::make_tuple(means, loglog_slope(recs));
  }, py::arg("dims"), py::arg("mode"), py::arg("batch") = 128, py::arg("n_batches") = 5, py::arg("seed") = 0,
     "Mean seconds per step for each D and the fitted log-log slope.");
}
