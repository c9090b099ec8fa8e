#include "snf/model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace snf {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

Tensor as_rows(const Tensor& batch, std::size_t dim) {
  if (batch.rank() == 1 && batch.size() == dim) return batch.reshaped({1, dim});
  if (batch.rank() == 2 && batch.cols() == dim) return batch;
  throw ShapeError("expected a batch [N, " + std::to_string(dim) + "], got " + shape_string(batch.shape()));
}

bool is_linear(const Layer& l) { return std::holds_alternative<FcLayer>(l) || std::holds_alternative<ConvLayer>(l); }

// Rows of a batch multiplied by a square matrix: out_n = M h_n.
Tensor apply_rows(const Tensor& m, const Tensor& rows) { return matmul_nt(rows, m); }
// delta_in_n = M^T delta_out_n.
Tensor apply_rows_transposed(const Tensor& m, const Tensor& rows) { return matmul(rows, m); }

Tensor conv_matrix(const ConvLayer& c, bool inverse_kernel) {
  return inverse_kernel ? build_conv_matrix(c.inverse_kernel, c.shape, c.inverse_pad())
                        : build_conv_matrix(c.kernel, c.shape, c.pad());
}

Tensor conv_rows_transposed(const ConvLayer& c, const Tensor& delta) {
  const Tensor flipped = flip_kernel(c.kernel);
  const Padding pad = c.pad();
  Tensor out(delta.shape());
  for (std::size_t n = 0; n < delta.rows(); ++n) conv2d_into(delta.row(n), c.shape, flipped, pad, out.row(n));
  return out;
}

Tensor slrelu_backward(const SmoothLeakyRelu& act, const Tensor& x, const Tensor& delta_out) {
  Tensor d(x.shape());
  auto xs = x.data();
  auto dout = delta_out.data();
  auto din = d.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    din[i] = slrelu_derivative(act.alpha, xs[i]) * dout[i] + slrelu_log_derivative_grad(act.alpha, xs[i]);
  }
  return d;
}

Tensor row_base_logprob(const Tensor& z) {
  Tensor out({z.rows()});
  for (std::size_t n = 0; n < z.rows(); ++n) out[n] = standard_normal_logpdf(z.row(n));
  return out;
}

double mean(const Tensor& v) {
  double s = 0.0;
  for (double x : v.data()) s += x;
  return v.size() == 0 ? 0.0 : s / static_cast<double>(v.size());
}

// A pass through the inverse model: layer-wise exact inverses of the learned
// inverses. Linear-layer matrices are kept for backpropagation.
struct InversePath {
  std::vector<Tensor> activations;
  std::vector<Tensor> matrices;  ///< R^{-1} or T(r)^{-1}; empty for non-linear layers
  Tensor log_prob;
};

InversePath inverse_model_path(const FlowModel& model, const Tensor& rows) {
  InversePath p;
  const auto& layers = model.layers();
  p.activations.reserve(layers.size() + 1);
  p.matrices.resize(layers.size());
  p.activations.push_back(rows);
  Tensor logdet({rows.rows()});
  double linear = 0.0;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const Tensor& h = p.activations.back();
    Tensor next = std::visit(
        Overloaded{
            [&](const FcLayer& l) {
              const LuFactorization lu = lu_factor(l.inverse_weight);
              linear -= logabsdet(lu).logabs;
              p.matrices[k] = inverse(lu);
              return apply_rows(p.matrices[k], h);
            },
            [&](const ConvLayer& l) {
              const LuFactorization lu = lu_factor(conv_matrix(l, true));
              linear -= logabsdet(lu).logabs;
              p.matrices[k] = inverse(lu);
              return apply_rows(p.matrices[k], h);
            },
            [&](const SmoothLeakyRelu& a) {
              logdet += slrelu_row_logdets(a, h);
              return slrelu_forward(a, h).y;
            },
            [&](const Squeeze& s) { return squeeze_forward(h, model.layer_shape(k), s.factor); },
        },
        layers[k]);
    p.activations.push_back(std::move(next));
  }
  p.log_prob = row_base_logprob(p.activations.back());
  p.log_prob += logdet;
  for (auto& v : p.log_prob.data()) v += linear;
  return p;
}

Tensor draw_probes(ProbeDistribution dist, std::size_t n, std::size_t dim, Rng& rng) {
  if (dist == ProbeDistribution::normal) return rng.normal_tensor({n, dim});
  Tensor t({n, dim});
  for (auto& v : t.data()) v = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  return t;
}

}  // namespace

double standard_normal_logpdf(std::span<const double> z) {
  double s = 0.0;
  for (double v : z) s += v * v;
  return -0.5 * s - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

Tensor ForwardTrace::log_prob() const {
  Tensor out = base_logprob;
  out += activation_logdet;
  for (auto& v : out.data()) v += linear_logdet;
  return out;
}

ProbeDistribution parse_probe_distribution(const std::string& text) {
  if (text == "normal") return ProbeDistribution::normal;
  if (text == "rademacher") return ProbeDistribution::rademacher;
  throw ConfigError("unknown probe distribution '" + text + "' (expected normal or rademacher)");
}

InverseMode parse_inverse_mode(const std::string& text) {
  if (text == "learned") return InverseMode::learned;
  if (text == "exact") return InverseMode::exact;
  throw ConfigError("unknown inverse mode '" + text + "' (expected learned or exact)");
}

// ---------------------------------------------------------------- FlowModel

FlowModel::FlowModel(ImageShape input_shape, std::vector<Layer> layers, std::string topology)
    : input_shape_(input_shape), layers_(std::move(layers)), topology_(std::move(topology)) {
  ImageShape s = input_shape_;
  for (auto& layer : layers_) {
    shapes_.push_back(s);
    std::visit(Overloaded{
                   [&](FcLayer& l) {
                     if (l.weight.rank() != 2 || l.dim() != s.size() || l.inverse_weight.shape() != l.weight.shape())
                       throw ShapeError("fc layer does not match dimension " + std::to_string(s.size()));
                   },
                   [&](ConvLayer& l) {
                     if (l.kernel.rank() != 4 || l.channels() != s.channels)
                       throw ShapeError("conv layer expects " + std::to_string(l.channels()) + " channels, got " +
                                        std::to_string(s.channels));
                     if (!(l.shape == s) || l.multiple.empty()) l.bind(s);
                   },
                   [&](SmoothLeakyRelu& a) {
                     if (!(a.alpha > 0.0 && a.alpha <= 1.0)) throw ConfigError("slrelu alpha must lie in (0, 1]");
                   },
                   [&](Squeeze& q) { s = squeeze_shape(s, q.factor); },
               },
               layer);
  }
}

Layer& FlowModel::mutable_layer(std::size_t k) {
  touch();
  return layers_.at(k);
}

std::vector<Tensor*> FlowModel::parameters() {
  touch();
  std::vector<Tensor*> out;
  for (auto& layer : layers_) {
    if (auto* f = std::get_if<FcLayer>(&layer)) {
      out.push_back(&f->weight);
      out.push_back(&f->inverse_weight);
    } else if (auto* c = std::get_if<ConvLayer>(&layer)) {
      out.push_back(&c->kernel);
      out.push_back(&c->inverse_kernel);
    }
  }
  return out;
}

std::vector<const Tensor*> FlowModel::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& layer : layers_) {
    if (const auto* f = std::get_if<FcLayer>(&layer)) {
      out.push_back(&f->weight);
      out.push_back(&f->inverse_weight);
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      out.push_back(&c->kernel);
      out.push_back(&c->inverse_kernel);
    }
  }
  return out;
}

std::vector<std::size_t> FlowModel::linear_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < layers_.size(); ++k)
    if (is_linear(layers_[k])) out.push_back(k);
  return out;
}

void FlowModel::amortize_logdets() {
  if (cache_fresh()) {
    ++stats_.hits;
    return;
  }
  cached_logdets_.assign(layers_.size(), 0.0);
  for (std::size_t k = 0; k < layers_.size(); ++k) cached_logdets_[k] = linear_logdet(layers_[k]);
  cache_version_ = version_;
  cache_valid_ = true;
  ++stats_.recomputes;
}

ForwardTrace FlowModel::forward(const Tensor& batch, bool amortized) {
  if (!amortized) return trace(batch, nullptr);
  amortize_logdets();
  return trace(batch, &cached_logdets_);
}

ForwardTrace FlowModel::forward_uncached(const Tensor& batch) const { return trace(batch, nullptr); }

ForwardTrace FlowModel::trace(const Tensor& batch, const std::vector<double>* logdets) const {
  ForwardTrace t;
  t.activations.reserve(layers_.size() + 1);
  t.activations.push_back(as_rows(batch, dim()));
  const std::size_t n = t.activations[0].rows();
  t.activation_logdet = Tensor({n});
  t.layer_logdets.assign(layers_.size(), 0.0);
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Tensor& h = t.activations.back();
    Tensor next = std::visit(Overloaded{
                                 [&](const FcLayer& l) { return fc_forward(l, h); },
                                 [&](const ConvLayer& l) { return conv_forward(l, h); },
                                 [&](const SmoothLeakyRelu& a) {
                                   const Tensor rows = slrelu_row_logdets(a, h);
                                   t.activation_logdet += rows;
                                   t.layer_logdets[k] = mean(rows);
                                   return slrelu_forward(a, h).y;
                                 },
                                 [&](const Squeeze& q) { return squeeze_forward(h, shapes_[k], q.factor); },
                             },
                             layers_[k]);
    if (is_linear(layers_[k])) {
      t.layer_logdets[k] = logdets ? (*logdets)[k] : linear_logdet(layers_[k]);
      t.linear_logdet += t.layer_logdets[k];
    }
    t.activations.push_back(std::move(next));
  }
  t.base_logprob = row_base_logprob(t.activations.back());
  return t;
}

Tensor FlowModel::inverse(const Tensor& z, InverseMode mode) const {
  Tensor h = as_rows(z, dim());
  for (std::size_t k = layers_.size(); k-- > 0;) {
    h = std::visit(Overloaded{
                       [&](const FcLayer& l) {
                         return mode == InverseMode::exact ? fc_inverse_exact(l, h) : fc_inverse_learned(l, h);
                       },
                       [&](const ConvLayer& l) {
                         return mode == InverseMode::exact ? conv_inverse_exact(l, h) : conv_inverse_learned(l, h);
                       },
                       [&](const SmoothLeakyRelu& a) { return slrelu_inverse(a, h); },
                       [&](const Squeeze& q) { return squeeze_inverse(h, shapes_[k], q.factor); },
                   },
                   layers_[k]);
  }
  return h;
}

// ---------------------------------------------------------------- densities

double linear_logdet(const Layer& layer) {
  if (const auto* f = std::get_if<FcLayer>(&layer)) return logabsdet(lu_factor(f->weight)).logabs;
  if (const auto* c = std::get_if<ConvLayer>(&layer)) return logabsdet(*conv_forward_lu(*c)).logabs;
  return 0.0;
}

double inverse_model_logdet(const Layer& layer) {
  if (const auto* f = std::get_if<FcLayer>(&layer)) return -logabsdet(lu_factor(f->inverse_weight)).logabs;
  if (const auto* c = std::get_if<ConvLayer>(&layer)) return -logabsdet(lu_factor(conv_matrix(*c, true))).logabs;
  return 0.0;
}

Tensor log_prob_forward(const FlowModel& model, const Tensor& batch) {
  return model.forward_uncached(batch).log_prob();
}

Tensor log_prob_amortized(FlowModel& model, const Tensor& batch) { return model.forward(batch, true).log_prob(); }

Tensor log_prob_inverse_model(const FlowModel& model, const Tensor& batch) {
  return inverse_model_path(model, as_rows(batch, model.dim())).log_prob;
}

double total_recon(const FlowModel& model, const Tensor& batch) {
  const ForwardTrace t = model.forward_uncached(batch);
  double r = 0.0;
  for (std::size_t k = 0; k < model.size(); ++k) {
    const Layer& l = model.layers()[k];
    if (const auto* f = std::get_if<FcLayer>(&l)) r += recon_loss(*f, t.activations[k]);
    if (const auto* c = std::get_if<ConvLayer>(&l)) r += recon_loss(*c, t.activations[k]);
  }
  return r;
}

MixtureValue mixture_objective(const FlowModel& model, const Tensor& batch, double lambda) {
  MixtureValue v;
  v.log_prob_f = mean(log_prob_forward(model, batch));
  v.log_prob_g = mean(log_prob_inverse_model(model, batch));
  v.recon = total_recon(model, batch);
  v.objective = 0.5 * v.log_prob_f + 0.5 * v.log_prob_g - lambda * v.recon;
  return v;
}

// ---------------------------------------------------------------- gradients

BatchGradients compute_gradients(const FlowModel& model, const Tensor& batch, const GradOptions& options, Rng* rng) {
  if (options.jvp_weight != 0.0 && rng == nullptr) throw ConfigError("jvp penalty requires a probe generator");
  const auto& layers = model.layers();
  const std::size_t L = layers.size();
  const ForwardTrace t = model.forward_uncached(batch);
  const bool exact = options.mode == GradMode::exact;

  BatchGradients out;
  out.report.mode = options.mode;
  out.report.lambda = options.lambda;
  out.report.jvp_weight = options.jvp_weight;
  out.log_prob_f = mean(t.log_prob());

  // Forward-model errors: delta[k] is d log p^f / d activations[k].
  std::vector<Tensor> delta(L + 1);
  delta[L] = -1.0 * t.activations[L];
  for (std::size_t k = L; k-- > 0;) {
    const Tensor& x = t.activations[k];
    delta[k] = std::visit(Overloaded{
                              [&](const FcLayer& l) { return matmul(delta[k + 1], l.weight); },
                              [&](const ConvLayer& l) { return conv_rows_transposed(l, delta[k + 1]); },
                              [&](const SmoothLeakyRelu& a) { return slrelu_backward(a, x, delta[k + 1]); },
                              [&](const Squeeze& q) {
                                return squeeze_inverse(delta[k + 1], model.layer_shape(k), q.factor);
                              },
                          },
                          layers[k]);
  }

  // Inverse-model path and its errors, only in exact mode.
  InversePath g;
  std::vector<Tensor> delta_g;
  if (exact) {
    g = inverse_model_path(model, t.activations[0]);
    out.log_prob_g = mean(g.log_prob);
    delta_g.resize(L + 1);
    delta_g[L] = -1.0 * g.activations[L];
    for (std::size_t k = L; k-- > 0;) {
      const Tensor& x = g.activations[k];
      delta_g[k] = std::visit(Overloaded{
                                  [&](const SmoothLeakyRelu& a) { return slrelu_backward(a, x, delta_g[k + 1]); },
                                  [&](const Squeeze& q) {
                                    return squeeze_inverse(delta_g[k + 1], model.layer_shape(k), q.factor);
                                  },
                                  [&](const auto&) { return apply_rows_transposed(g.matrices[k], delta_g[k + 1]); },
                              },
                              layers[k]);
    }
  } else {
    out.log_prob_g = out.log_prob_f;
  }

  for (std::size_t k = 0; k < L; ++k) {
    if (!is_linear(layers[k])) continue;
    const PathSignals fs{t.activations[k], t.activations[k + 1], delta[k + 1], delta[k]};
    LayerGrad lg;
    if (const auto* f = std::get_if<FcLayer>(&layers[k])) {
      if (exact) {
        const PathSignals gs{g.activations[k], g.activations[k + 1], delta_g[k + 1], delta_g[k]};
        lg = fc_exact_grads(*f, fs, gs, inverse(lu_factor(f->weight)), g.matrices[k]);
      } else {
        lg = fc_snf_grads(*f, fs);
      }
      if (options.jvp_weight != 0.0) {
        JvpPenalty j = jvp_inverse_penalty(*f, draw_probes(options.probe, options.jvp_probes, f->dim(), *rng));
        out.jvp += j.loss;
        lg.forward.jvp = std::move(j.forward);
        lg.inverse.jvp = std::move(j.inverse);
      }
    } else {
      const auto& c = std::get<ConvLayer>(layers[k]);
      if (exact) {
        const PathSignals gs = options.strict_exact
                                   ? PathSignals{g.activations[k], g.activations[k + 1], delta_g[k + 1], delta_g[k]}
                                   : fs;
        lg = conv_exact_grads(c, fs, gs, inverse(lu_factor(conv_matrix(c, false))), g.matrices[k]);
      } else {
        lg = conv_snf_grads(c, fs);
      }
      if (options.jvp_weight != 0.0) {
        JvpPenalty j = jvp_inverse_penalty(c, draw_probes(options.probe, options.jvp_probes, c.shape.size(), *rng));
        out.jvp += j.loss;
        lg.forward.jvp = std::move(j.forward);
        lg.inverse.jvp = std::move(j.inverse);
      }
    }
    lg.layer_index = k;
    out.recon += lg.recon;
    out.report.layers.push_back(std::move(lg));
  }

  out.objective =
      0.5 * out.log_prob_f + 0.5 * out.log_prob_g - options.lambda * out.recon - options.jvp_weight * out.jvp;
  return out;
}

// ---------------------------------------------------------------- sampling

Tensor sample(const FlowModel& model, std::size_t n, InverseMode mode, Rng& rng) {
  return model.inverse(rng.normal_tensor({n, model.dim()}), mode);
}

void resync_inverse(FlowModel& model) {
  for (std::size_t k : model.linear_layers()) {
    Layer& layer = model.mutable_layer(k);
    if (auto* f = std::get_if<FcLayer>(&layer)) {
      f->inverse_weight = inverse(lu_factor(f->weight));
      continue;
    }
    auto& c = std::get<ConvLayer>(layer);
    if (c.kernel.dim(2) != 1 || c.kernel.dim(3) != 1) {
      throw ConfigError("resync_inverse: only 1x1 convolutions have an exact convolutional inverse");
    }
    const std::size_t C = c.channels();
    Tensor a({C, C});
    for (std::size_t o = 0; o < C; ++o)
      for (std::size_t i = 0; i < C; ++i) a(o, i) = c.kernel(o, i, 0, 0);
    const Tensor inv = inverse(lu_factor(a)).reshaped({C, C, 1, 1});
    c.inverse_kernel = pad_kernel_center(inv, c.inverse_kernel.dim(2), c.inverse_kernel.dim(3));
  }
}

// ---------------------------------------------------------------- preprocessing

Preprocessed preprocess(const PreprocessSpec& spec, const Tensor& pixels, Rng* noise) {
  if (!(spec.shrink >= 0.0 && spec.shrink < 0.5)) throw ConfigError("logit shrink must lie in [0, 0.5)");
  if (!(spec.scale > 0.0)) throw ConfigError("preprocessing scale must be positive");
  const Tensor rows = pixels.rank() == 1 ? pixels.reshaped({1, pixels.size()}) : pixels;
  if (rows.rank() != 2) throw ShapeError("preprocess expects [N, D] pixels");
  Preprocessed out{Tensor(rows.shape()), Tensor({rows.rows()})};
  const double keep = 1.0 - 2.0 * spec.shrink;
  const double constant = std::log(keep) + std::log(spec.scale);
  for (std::size_t n = 0; n < rows.rows(); ++n) {
    auto in = rows.row(n);
    auto x = out.x.row(n);
    double ld = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double u = (spec.dequantize && noise) ? noise->uniform() : 0.0;
      const double y = (in[i] + u) * spec.scale;
      if (!(y >= 0.0 && y <= 1.0)) throw ConfigError("pixel value outside the representable range");
      const double yp = spec.shrink + keep * y;
      if (!(yp > 0.0 && yp < 1.0)) throw DegenerateInput("logit of 0 or 1; use a positive shrink");
      x[i] = std::log(yp) - std::log1p(-yp);
      ld += constant - std::log(yp) - std::log1p(-yp);
    }
    out.logdet[n] = ld;
  }
  return out;
}

Tensor deprocess(const PreprocessSpec& spec, const Tensor& x) {
  Tensor out(x.shape());
  const double keep = 1.0 - 2.0 * spec.shrink;
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double yp = 1.0 / (1.0 + std::exp(-src[i]));
    dst[i] = (yp - spec.shrink) / keep / spec.scale;
  }
  return out;
}

// ---------------------------------------------------------------- builders

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("bad number '" + s + "' in " + what);
  return v;
}

struct Builder {
  const ModelSpec& spec;
  Rng& rng;
  ImageShape shape;
  std::vector<Layer> layers;

  void fc() { layers.emplace_back(FcLayer::initialized(shape.size(), rng, spec.init_gain)); }
  void act(double alpha) { layers.emplace_back(SmoothLeakyRelu{alpha}); }
  void conv(std::size_t k) {
    if (k % 2 == 0 || k == 0) throw ConfigError("convolution kernels must have odd size");
    std::size_t kr = spec.inverse_kernel == 0 ? k : spec.inverse_kernel;
    if (kr < k || kr % 2 == 0) throw ConfigError("inverse kernel must be odd and at least the forward kernel size");
    layers.emplace_back(ConvLayer::initialized(shape, k, kr, rng, spec.init_gain));
  }
  void squeeze() {
    shape = squeeze_shape(shape, 2);
    layers.emplace_back(Squeeze{2});
  }
};

}  // namespace

FlowModel build_model(const ModelSpec& spec, ImageShape input_shape, Rng& rng) {
  Builder b{spec, rng, input_shape, {}};
  const std::string& topo = spec.topology;
  if (topo == "fc2") {
    b.fc();
    b.act(spec.alpha);
    b.fc();
    b.act(spec.alpha);
  } else if (topo == "conv9") {
    for (int block = 0; block < 3; ++block) {
      if (block > 0) b.squeeze();
      for (int j = 0; j < 3; ++j) {
        b.conv(3);
        b.act(spec.alpha);
      }
    }
  } else if (topo.rfind("custom:", 0) == 0) {
    const auto tokens = split(topo.substr(7), ',');
    if (tokens.empty()) throw ConfigError("empty custom topology");
    for (const auto& tok : tokens) {
      if (tok == "fc") {
        b.fc();
      } else if (tok == "slrelu") {
        b.act(spec.alpha);
      } else if (tok.rfind("slrelu:", 0) == 0) {
        b.act(parse_double(tok.substr(7), "slrelu slope"));
      } else if (tok == "squeeze") {
        b.squeeze();
      } else if (tok.rfind("conv", 0) == 0 && tok.size() > 4) {
        b.conv(static_cast<std::size_t>(parse_double(tok.substr(4), "conv size")));
      } else {
        throw ConfigError("unknown layer token '" + tok + "'");
      }
    }
  } else {
    throw ConfigError("unknown model topology '" + topo + "' (expected fc2, conv9 or custom:<layers>)");
  }
  return FlowModel(input_shape, std::move(b.layers), topo);
}

}  // namespace snf
