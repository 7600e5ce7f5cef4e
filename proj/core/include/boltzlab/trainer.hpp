#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "boltzlab/flow.hpp"
#include "boltzlab/losses.hpp"
#include "boltzlab/optimizer.hpp"
#include "boltzlab/rng.hpp"
#include "boltzlab/targets.hpp"

namespace boltzlab {

enum class Phase { kPretrain, kFinetune };

/// Which side of a threshold on x1 counts as the minor mode.
struct ModeSplit {
  double threshold = 0.0;
  bool minor_is_right = true;
};

/// The saddle of a DoubleWell target, or x1 = 0 for anything else.
ModeSplit default_mode_split(const EnergyModel& target);

struct TrainConfig {
  Phase phase = Phase::kFinetune;
  LossConfig loss;
  Index iters = 5000;
  Index batch_size = 256;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  /// Evaluate at iteration 0, every eval_every iterations and after the last one.
  Index eval_every = 500;
  Index eval_samples = 10000;
  /// Unset means default_mode_split(target).
  std::optional<double> mode_threshold;
  /// Fraction of `iters` actually run; 0.1 gives a partial pretraining.
  double fraction = 1.0;
  /// Variance-reduced gradients with a control variate on the score (costly).
  bool trick_enabled = false;
  double trick_decay = 0.99;
  /// Fill MetricsRecord::wall_ms. Off by default so metrics are reproducible bit for bit.
  bool record_timing = false;

  Index effective_iters() const;
  void validate() const;
};

/// Stable field names: iter, loss_value, minor_mode_fraction, mean_UB,
/// K_estimate, ess, logZ_hat, grad_norm, wall_ms.
struct MetricsRecord {
  Index iter = 0;
  double loss_value = 0.0;
  double minor_mode_fraction = 0.0;
  double mean_UB = 0.0;
  double K_estimate = 0.0;
  double ess = 0.0;
  double logZ_hat = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

/// One JSON object per line; non-finite values are written as null.
std::string to_json_line(const MetricsRecord& record);

/// Per-iteration values on the training minibatch. Pretraining leaves K_estimate
/// and mean_UB empty.
struct TrainTrace {
  std::vector<double> loss;
  std::vector<double> K_estimate;
  std::vector<double> mean_UB;
  std::vector<double> grad_norm;
  std::vector<double> minor_mode_fraction;
};

struct TrainResult {
  FlowModel model;
  std::vector<MetricsRecord> metrics;
  TrainTrace trace;
  /// Importance-weight overflow notices and similar non-fatal events.
  std::vector<std::string> warnings;
};

/// Raised on a non-finite loss or gradient. Carries the parameters from before
/// the failing step and the offending batch.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, Index iter, FlowModel last_good, Eigen::MatrixXd batch);

  Index iter() const noexcept { return iter_; }
  const FlowModel& last_good() const noexcept { return last_good_; }
  const Eigen::MatrixXd& batch() const noexcept { return batch_; }

 private:
  Index iter_;
  FlowModel last_good_;
  Eigen::MatrixXd batch_;
};

using MetricsCallback = std::function<void(const MetricsRecord&)>;

/// Samples n_eval points and reports minor-mode fraction, mean U_B, K, ess and log Z.
MetricsRecord evaluate(const FlowModel& model, const EnergyModel& target, Index n_eval, const ModeSplit& split,
                       Rng& rng);

/// Minimizes klz over reshuffled minibatches of `data`.
TrainResult pretrain(FlowModel model, const Eigen::MatrixXd& data, const EnergyModel& target, const TrainConfig& config,
                     const MetricsCallback& on_metrics = {});

/// Data-free training with config.loss on batches generated by the current model.
TrainResult finetune(FlowModel model, const EnergyModel& target, const TrainConfig& config,
                     const MetricsCallback& on_metrics = {});

}  // namespace boltzlab
