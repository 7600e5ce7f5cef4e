#pragma once

#include <string_view>

#include <Eigen/Core>

namespace boltzlab {

struct OptimizerConfig {
  enum class Kind { kSgd, kAdam };

  Kind kind = Kind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

std::string_view optimizer_name(OptimizerConfig::Kind kind);
OptimizerConfig::Kind parse_optimizer_kind(std::string_view name);

/// First-order optimizer over a flat parameter vector.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, Eigen::Index size);

  /// params -= update(grad).
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  long steps() const noexcept { return t_; }

 private:
  OptimizerConfig config_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long t_ = 0;
};

}  // namespace boltzlab
