#include "snf/data_io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace snf {

namespace {

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in, const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw FormatError(path + ": cannot initialize gzip decoder");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  zs.next_in = const_cast<unsigned char*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError(path + ": corrupt gzip stream");
    }
    out.insert(out.end(), buf, buf + (sizeof buf - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw FormatError(path + ": truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool parse_number(const std::string& text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  char* end = nullptr;
  out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size();
}

}  // namespace

// ---------------------------------------------------------------- datasets

Tensor load_idx(const std::string& path) {
  auto bytes = read_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) bytes = gunzip(bytes, path);
  if (bytes.size() < 4) throw FormatError(path + ": truncated IDX header");
  const std::uint32_t magic = read_be32(bytes.data());
  std::size_t ndims = 0;
  if (magic == 0x00000803) {
    ndims = 3;
  } else if (magic == 0x00000801) {
    ndims = 1;
  } else {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x", magic);
    throw FormatError(path + ": " + buf);
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw FormatError(path + ": truncated IDX header");
  std::vector<std::size_t> dims(ndims);
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    dims[d] = read_be32(bytes.data() + 4 + 4 * d);
    count *= dims[d];
  }
  if (bytes.size() < header + count) throw FormatError(path + ": truncated IDX payload");
  if (bytes.size() > header + count) throw FormatError(path + ": trailing bytes after IDX payload");
  const Shape shape = ndims == 3 ? Shape{dims[0], 1, dims[1], dims[2]} : Shape{dims[0]};
  Tensor t(shape);
  for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<double>(bytes[header + i]);
  return t;
}

Tensor load_csv_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  bool first = true;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      if (!parse_number(cell, v)) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (first) {
        first = false;  // header row
        continue;
      }
      throw FormatError(path + ":" + std::to_string(line_no) + ": non-numeric value");
    }
    first = false;
    if (rows == 0) {
      cols = row.size();
    } else if (row.size() != cols) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(cols) + " columns");
    }
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0) return Tensor({0, 0});
  return Tensor({rows, cols}, std::move(values));
}

Tensor synthetic_2d(const std::string& name, std::size_t n, std::uint64_t seed) {
  if (name != "two_moons" && name != "ring" && name != "grid_of_gaussians" && name != "grid") {
    throw ConfigError("unknown synthetic dataset '" + name + "' (expected two_moons, ring or grid_of_gaussians)");
  }
  Rng rng(seed);
  Tensor out({n, 2});
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0, y = 0.0;
    if (name == "two_moons") {
      const double t = pi * rng.uniform();
      if (rng.uniform() < 0.5) {
        x = std::cos(t);
        y = std::sin(t);
      } else {
        x = 1.0 - std::cos(t);
        y = 1.0 - std::sin(t) - 0.5;
      }
      x += 0.1 * rng.normal();
      y += 0.1 * rng.normal();
    } else if (name == "ring") {
      const double theta = 2.0 * pi * rng.uniform();
      const double r = 1.0 + 0.1 * rng.normal();
      x = r * std::cos(theta);
      y = r * std::sin(theta);
    } else {
      const std::size_t c = rng.index(9);
      x = -2.0 + 2.0 * static_cast<double>(c % 3) + 0.2 * rng.normal();
      y = -2.0 + 2.0 * static_cast<double>(c / 3) + 0.2 * rng.normal();
    }
    out(i, 0) = x;
    out(i, 1) = y;
  }
  return out;
}

Split shuffled_split(std::size_t n, double valid_fraction, std::uint64_t seed) {
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  const auto n_valid = static_cast<std::size_t>(std::llround(static_cast<double>(n) * valid_fraction));
  Split s;
  s.train.assign(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_valid));
  s.valid.assign(perm.end() - static_cast<std::ptrdiff_t>(n_valid), perm.end());
  return s;
}

Split ordered_split(std::size_t n, std::size_t n_valid) {
  if (n_valid > n) throw ConfigError("validation split larger than the dataset");
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_valid ? s.train : s.valid).push_back(i);
  return s;
}

Dataset load_dataset(const std::string& spec, const DatasetOptions& o) {
  Dataset ds;
  Tensor rows;
  Split split;
  if (spec.rfind("idx:", 0) == 0) {
    const Tensor images = load_idx(spec.substr(4));
    if (images.rank() != 4) throw ConfigError(spec + " is a label file, not images");
    ds.kind = "idx_images";
    ds.shape = ImageShape{images.dim(1), images.dim(2), images.dim(3)};
    rows = images.reshaped({images.dim(0), ds.shape.size()});
    const std::size_t n = rows.rows();
    const std::size_t n_valid =
        n > o.idx_valid ? o.idx_valid
                        : static_cast<std::size_t>(std::llround(static_cast<double>(n) * o.valid_fraction));
    split = ordered_split(n, n_valid);
    ds.data.pixels = true;
    ds.data.preprocess = o.preprocess;
  } else if (spec.rfind("csv:", 0) == 0) {
    rows = load_csv_points(spec.substr(4));
    if (rows.rows() == 0) throw ConfigError(spec + " contains no points");
    ds.kind = "csv_points";
    ds.shape = ImageShape{rows.cols(), 1, 1};
    split = shuffled_split(rows.rows(), o.valid_fraction, o.seed);
  } else {
    rows = synthetic_2d(spec, o.synthetic_points, o.seed);
    ds.kind = "synthetic_2d";
    ds.shape = ImageShape{2, 1, 1};
    split = shuffled_split(rows.rows(), o.valid_fraction, o.seed);
  }
  ds.data.train = gather_rows(rows, split.train);
  ds.data.valid = gather_rows(rows, split.valid);
  return ds;
}

// ---------------------------------------------------------------- checkpoints

std::string encode_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double decode_double(const std::string& s) {
  double v = 0.0;
  if (!parse_number(s, v)) throw FormatError("bad number '" + s + "' in checkpoint");
  return v;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [k, t] : tensors)
    if (k == name) return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

const std::string& Checkpoint::value(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw FormatError("checkpoint has no header key '" + key + "'");
  return it->second;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos;
  std::size_t end;

  void need(std::size_t n) const {
    if (end - pos < n) throw FormatError("truncated checkpoint payload");
  }
  std::uint64_t le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes[pos + static_cast<std::size_t>(i)]} << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string buf = "SNFCKPT " + std::to_string(ckpt.version) + "\n";
  for (const auto& [k, v] : ckpt.header) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw FormatError("checkpoint header entries must be single-line key = value pairs");
    buf += k + " = " + v + "\n";
  }
  buf += "end\n";
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(buf, d);
    for (double v : t.data()) put_u64(buf, std::bit_cast<std::uint64_t>(v));
  }
  put_u32(buf, crc_of(reinterpret_cast<const unsigned char*>(buf.data()), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_bytes(path);
  const std::string magic = "SNFCKPT ";
  if (bytes.size() < magic.size() || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0)
    throw FormatError(path + ": not a checkpoint");

  std::size_t pos = magic.size();
  auto next_line = [&]() {
    std::string line;
    while (pos < bytes.size() && bytes[pos] != '\n') line.push_back(static_cast<char>(bytes[pos++]));
    if (pos >= bytes.size()) throw FormatError(path + ": truncated checkpoint header");
    ++pos;
    return line;
  };
  Checkpoint ck;
  {
    const std::string v = next_line();
    double ver = 0.0;
    if (!parse_number(v, ver) || ver != std::floor(ver)) throw FormatError(path + ": bad version field");
    ck.version = static_cast<int>(ver);
    if (ck.version != kCheckpointVersion)
      throw VersionMismatch(path + ": checkpoint version " + v + ", this build reads version " +
                            std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 4) throw FormatError(path + ": truncated checkpoint");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = static_cast<std::uint32_t>(Reader{bytes, body, bytes.size()}.le(4));
  if (crc_of(bytes.data(), body) != stored) throw ChecksumError(path + ": checksum mismatch");

  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError(path + ": malformed header line '" + line + "'");
    ck.header[line.substr(0, eq)] = line.substr(eq + 3);
  }
  Reader r{bytes, pos, body};
  while (r.pos < body) {
    const auto name_len = static_cast<std::size_t>(r.le(4));
    r.need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
    r.pos += name_len;
    const auto rank = static_cast<std::size_t>(r.le(4));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.le(8));
    const std::size_t count = shape_size(shape);
    r.need(count * 8);
    std::vector<double> values(count);
    for (auto& v : values) v = std::bit_cast<double>(r.le(8));
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ck;
}

// ---------------------------------------------------------------- training state

namespace {

std::string describe_layers(const FlowModel& model) {
  std::string s;
  for (const auto& layer : model.layers()) {
    if (!s.empty()) s += ';';
    if (std::holds_alternative<FcLayer>(layer)) s += "fc";
    else if (std::holds_alternative<ConvLayer>(layer)) s += "conv";
    else if (const auto* a = std::get_if<SmoothLeakyRelu>(&layer)) s += "slrelu:" + encode_double(a->alpha);
    else s += "squeeze:" + std::to_string(std::get<Squeeze>(layer).factor);
  }
  return s;
}

std::size_t parse_size(const std::string& s) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (s.empty() || s[0] == '-' || end != s.c_str() + s.size()) throw FormatError("bad integer '" + s + "' in checkpoint");
  return static_cast<std::size_t>(v);
}

}  // namespace

Checkpoint make_training_checkpoint(const FlowModel& model, const TrainState& st,
                                    const std::map<std::string, std::string>& extra) {
  Checkpoint ck;
  ck.header = extra;
  auto& h = ck.header;
  const ImageShape s = model.input_shape();
  h["topology"] = model.topology();
  h["input_shape"] = std::to_string(s.channels) + " " + std::to_string(s.height) + " " + std::to_string(s.width);
  h["layers"] = describe_layers(model);
  h["adam.lr"] = encode_double(st.adam.lr);
  h["adam.beta1"] = encode_double(st.adam.beta1);
  h["adam.beta2"] = encode_double(st.adam.beta2);
  h["adam.eps"] = encode_double(st.adam.eps);
  h["adam.step"] = std::to_string(st.adam.step);
  const auto& c = st.lambda;
  h["lambda.mode"] = c.mode == LambdaController::Mode::geco ? "geco" : "fixed";
  h["lambda.value"] = encode_double(c.lambda);
  h["lambda.ema"] = encode_double(c.ema);
  h["lambda.decay"] = encode_double(c.decay);
  h["lambda.gain"] = encode_double(c.gain);
  h["lambda.tolerance"] = encode_double(c.tolerance);
  h["lambda.min"] = encode_double(c.lambda_min);
  h["lambda.max"] = encode_double(c.lambda_max);
  h["epoch"] = std::to_string(st.epoch);
  h["step"] = std::to_string(st.step);
  h["rng"] = st.rng.state();
  h["best_valid_nll"] = encode_double(st.best_valid_nll);
  h["best_epoch"] = std::to_string(st.best_epoch);

  for (std::size_t k = 0; k < model.size(); ++k) {
    const std::string p = "layer." + std::to_string(k) + ".";
    if (const auto* f = std::get_if<FcLayer>(&model.layers()[k])) {
      ck.tensors.emplace_back(p + "weight", f->weight);
      ck.tensors.emplace_back(p + "inverse_weight", f->inverse_weight);
    } else if (const auto* cv = std::get_if<ConvLayer>(&model.layers()[k])) {
      ck.tensors.emplace_back(p + "kernel", cv->kernel);
      ck.tensors.emplace_back(p + "inverse_kernel", cv->inverse_kernel);
    }
  }
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    ck.tensors.emplace_back("adam.m." + std::to_string(i), st.adam.m[i]);
    ck.tensors.emplace_back("adam.v." + std::to_string(i), st.adam.v[i]);
  }
  return ck;
}

FlowModel model_from_checkpoint(const Checkpoint& ck) {
  std::istringstream shape_in(ck.value("input_shape"));
  ImageShape s;
  shape_in >> s.channels >> s.height >> s.width;
  if (!shape_in) throw FormatError("bad input_shape in checkpoint");

  std::vector<Layer> layers;
  std::stringstream ss(ck.value("layers"));
  std::string tok;
  std::size_t k = 0;
  for (; std::getline(ss, tok, ';'); ++k) {
    const std::string p = "layer." + std::to_string(k) + ".";
    if (tok == "fc") {
      layers.emplace_back(FcLayer{ck.tensor(p + "weight"), ck.tensor(p + "inverse_weight")});
    } else if (tok == "conv") {
      ConvLayer c;
      c.kernel = ck.tensor(p + "kernel");
      c.inverse_kernel = ck.tensor(p + "inverse_kernel");
      layers.emplace_back(std::move(c));
    } else if (tok.rfind("slrelu:", 0) == 0) {
      layers.emplace_back(SmoothLeakyRelu{decode_double(tok.substr(7))});
    } else if (tok.rfind("squeeze:", 0) == 0) {
      layers.emplace_back(Squeeze{parse_size(tok.substr(8))});
    } else {
      throw FormatError("unknown layer '" + tok + "' in checkpoint");
    }
  }
  return FlowModel(s, std::move(layers), ck.value("topology"));
}

TrainState state_from_checkpoint(const Checkpoint& ck) {
  TrainState st;
  st.adam.lr = decode_double(ck.value("adam.lr"));
  st.adam.beta1 = decode_double(ck.value("adam.beta1"));
  st.adam.beta2 = decode_double(ck.value("adam.beta2"));
  st.adam.eps = decode_double(ck.value("adam.eps"));
  st.adam.step = parse_size(ck.value("adam.step"));
  for (std::size_t i = 0;; ++i) {
    const std::string m = "adam.m." + std::to_string(i);
    bool found = false;
    for (const auto& [name, t] : ck.tensors) found = found || name == m;
    if (!found) break;
    st.adam.m.push_back(ck.tensor(m));
    st.adam.v.push_back(ck.tensor("adam.v." + std::to_string(i)));
  }
  auto& c = st.lambda;
  const std::string& mode = ck.value("lambda.mode");
  if (mode != "fixed" && mode != "geco") throw FormatError("bad lambda mode '" + mode + "' in checkpoint");
  c.mode = mode == "geco" ? LambdaController::Mode::geco : LambdaController::Mode::fixed;
  c.lambda = decode_double(ck.value("lambda.value"));
  c.ema = decode_double(ck.value("lambda.ema"));
  c.decay = decode_double(ck.value("lambda.decay"));
  c.gain = decode_double(ck.value("lambda.gain"));
  c.tolerance = decode_double(ck.value("lambda.tolerance"));
  c.lambda_min = decode_double(ck.value("lambda.min"));
  c.lambda_max = decode_double(ck.value("lambda.max"));
  st.epoch = parse_size(ck.value("epoch"));
  st.step = parse_size(ck.value("step"));
  st.rng.set_state(ck.value("rng"));
  st.best_valid_nll = decode_double(ck.value("best_valid_nll"));
  st.best_epoch = parse_size(ck.value("best_epoch"));
  return st;
}

}  // namespace snf
