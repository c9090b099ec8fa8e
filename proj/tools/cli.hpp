#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "snf/data_io.hpp"

namespace snf::cli {

// Stable exit-code contract for harnesses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitNumerical = 1;  ///< divergence, instability or a singular/non-convergent layer
inline constexpr int kExitUsage = 2;      ///< bad flags, config, data or checkpoint

/// Everything a training-style command needs, after flag and config-file parsing.
struct RunConfig {
  ModelSpec model;
  std::string data = "two_moons";
  DatasetOptions dataset;
  TrainConfig train;
  std::string out_dir = "run";
  std::size_t threads = 1;
  std::string resume;  ///< checkpoint to continue from; empty starts fresh

  /// Throws ConfigError. Runs before any data is loaded.
  void validate() const;
};

/// Runs the snf command line; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace snf::cli
