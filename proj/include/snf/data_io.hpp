#pragma once

#include <map>
#include <string>
#include <vector>

#include "snf/training.hpp"

namespace snf {

/// IDX image files (magic 0x00000803) load as [N, 1, H, W]; label files
/// (0x00000801) as [N]. Values are the raw bytes. Gzip-compressed files are
/// decompressed transparently.
Tensor load_idx(const std::string& path);

/// One point per line, comma separated; a non-numeric first line is a header.
Tensor load_csv_points(const std::string& path);

// Synthetic 2-D densities:
//   two_moons          t ~ U[0, pi]; upper moon (cos t, sin t), lower moon
//                      (1 - cos t, 1 - sin t - 0.5), each with prob 1/2, plus N(0, 0.1^2) noise
//   ring               theta ~ U[0, 2 pi), radius ~ N(1, 0.1^2)
//   grid_of_gaussians  uniform over the 9 centres {-2, 0, 2}^2, N(0, 0.2^2) per axis
Tensor synthetic_2d(const std::string& name, std::size_t n, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
};

/// Seeded shuffle, then the last round(n * valid_fraction) indices validate.
Split shuffled_split(std::size_t n, double valid_fraction, std::uint64_t seed);
/// First n - n_valid indices train, the rest validate (no shuffling).
Split ordered_split(std::size_t n, std::size_t n_valid);

struct Dataset {
  std::string kind;  ///< synthetic_2d, csv_points or idx_images
  ImageShape shape;  ///< per-example geometry; points use {D, 1, 1}
  TrainData data;
};

struct DatasetOptions {
  std::size_t synthetic_points = 4096;
  double valid_fraction = 0.1;
  std::size_t idx_valid = 10000;  ///< trailing IDX images held out
  std::uint64_t seed = 0;
  PreprocessSpec preprocess;
};

/// spec: two_moons | ring | grid | idx:<path> | csv:<path>.
Dataset load_dataset(const std::string& spec, const DatasetOptions& options);

// Checkpoint container:
//   "SNFCKPT <version>\n", "key = value\n" lines, "end\n",
//   then per tensor: u32 name length, name, u32 rank, u64 extents, f64 values
//   (all little-endian), then a CRC32 of every preceding byte.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  const std::string& value(const std::string& key) const;
};

/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws VersionMismatch, ChecksumError or FormatError.
Checkpoint load_checkpoint(const std::string& path);

/// Model, optimizer, lambda controller, counters and RNG in one checkpoint.
Checkpoint make_training_checkpoint(const FlowModel& model, const TrainState& state,
                                    const std::map<std::string, std::string>& extra = {});
FlowModel model_from_checkpoint(const Checkpoint& ckpt);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

/// Lossless text form of a double (hexfloat) and its parser.
std::string encode_double(double v);
double decode_double(const std::string& s);

}  // namespace snf
