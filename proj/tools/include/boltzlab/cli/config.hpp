#pragma once

// Experiment configuration: a flat, sectioned key = value file.
//
//   # comment
//   [section]
//   key = value
//
// Blank lines and lines starting with '#' are ignored. Every key belongs to a
// section, keys may appear at most once, and unknown sections or keys are
// rejected with the offending line number. Missing keys keep their defaults.
// Lists are comma separated. Booleans are true or false. Doubles accept inf.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "boltzlab/flow.hpp"
#include "boltzlab/sampler.hpp"
#include "boltzlab/targets.hpp"
#include "boltzlab/trainer.hpp"

namespace boltzlab::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TargetSection {
  /// double_well or gaussian.
  std::string kind = "double_well";
  DoubleWellParams double_well;
  /// Standard deviation of the gaussian target; its dim is double_well.dim.
  double gaussian_sigma = 1.0;
};

struct SamplerSection {
  PTConfig pt;
  int ladder_size = 6;
  double t_max = 10.0;
  /// Dataset encoding written by sample-data: binary or text.
  std::string format = "binary";
};

struct EvalSection {
  Index samples = 10000;
  int bins = 50;
};

struct PitfallSection {
  int grid_points = 64;
  double horizon = 10.0;
  double dt = 0.01;
  int naive_steps = 30;
  double naive_learning_rate = 0.01;
  Index naive_batch = 16;
  Index gibbs_pairs = 10000;
  int stabilizer_states = 8;
  int stabilizer_batch = 2;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  /// Empty means <output_dir>/dataset.bin (or .txt for the text format).
  std::string dataset;
  TargetSection target;
  /// model.dim always follows target dim.
  FlowConfig model;
  SamplerSection sampler;
  TrainConfig pretrain;
  /// When set, pretrain.iters is finetune.iters / 10.
  bool pretrain_iters_auto = true;
  TrainConfig finetune;
  EvalSection eval;
  PitfallSection pitfall;

  ExperimentConfig();

  /// Fills derived fields (model dim, ladder, automatic pretraining length,
  /// per-phase seeds) and checks every section. Throws ConfigError.
  void resolve();

  std::filesystem::path dataset_path() const;
  std::unique_ptr<EnergyModel> make_target() const;

  /// Every key with its resolved value, in schema order. Parsing this text
  /// gives back the same configuration.
  std::string to_text() const;
  /// FNV-1a digest of to_text().
  std::string hash() const;
  /// Digest of the settings that determine a dataset: seed, [target] and [sampler].
  std::string data_hash() const;
};

/// Seeds for the independent random streams of one experiment.
enum class Stream : unsigned { kSampler = 0, kModelInit = 1, kPretrain = 2, kFinetune = 3, kEval = 4, kPitfall = 5 };
std::uint64_t derive_seed(std::uint64_t seed, Stream stream);

/// Parses and resolves. `origin` names the source in error messages.
ExperimentConfig parse_config(std::string_view text, std::string_view origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

struct ConfigKey {
  std::string section;
  std::string key;
  std::string help;
};
/// The accepted keys, in the order to_text() writes them.
std::vector<ConfigKey> config_keys();

}  // namespace boltzlab::cli
