#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace boltzlab {

using Eigen::Index;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetFormat { kText, kBinary };

DatasetFormat parse_dataset_format(std::string_view name);

/// Reference samples with the provenance needed to reproduce them.
struct Dataset {
  Eigen::MatrixXd x;
  std::string target_id;
  /// Hex digest of the resolved configuration that produced the samples.
  std::string config_hash;
  std::uint64_t seed = 0;

  Index dim() const noexcept { return x.cols(); }
  Index count() const noexcept { return x.rows(); }
};

/// Layout: a text header
///   boltzlab-dataset 1 <text|binary>
///   dim D / count N / target ID / config_hash H / seed S
///   data
/// followed by N rows of D values. Text rows hold space-separated hex floats;
/// binary rows are little-endian IEEE-754 doubles. Both round-trip exactly.
void write_dataset(const Dataset& data, const std::filesystem::path& path, DatasetFormat format);
Dataset read_dataset(const std::filesystem::path& path);

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace boltzlab
