#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "snf/tensor.hpp"

namespace snf {

/// Seeded generator whose draws are identical on every platform.
///
/// std::mt19937_64 is fully specified by the standard, but the std
/// distributions are not, so uniform/normal/index draws are derived from the
/// raw 64-bit output here (53-bit mantissa uniforms, Box-Muller normals).
class Rng {
 public:
  Rng() : engine_(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t index(std::size_t n);

  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0);
  std::vector<std::size_t> permutation(std::size_t n);

  /// Full engine state as text, suitable for checkpoints.
  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace snf
