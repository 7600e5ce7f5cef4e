#include "boltzlab/optimizer.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace boltzlab {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("optimizer: learning_rate must be positive and finite");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
    throw std::invalid_argument("optimizer: need 0 <= beta1, beta2 < 1 and epsilon > 0");
  }
}

std::string_view optimizer_name(OptimizerConfig::Kind kind) {
  return kind == OptimizerConfig::Kind::kSgd ? "sgd" : "adam";
}

OptimizerConfig::Kind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") {
    return OptimizerConfig::Kind::kSgd;
  }
  if (name == "adam") {
    return OptimizerConfig::Kind::kAdam;
  }
  throw std::invalid_argument(fmt::format("unknown optimizer '{}' (expected sgd or adam)", name));
}

Optimizer::Optimizer(const OptimizerConfig& config, Eigen::Index size)
    : config_(config), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {
  config_.validate();
}

void Optimizer::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("optimizer: parameter or gradient size changed");
  }
  ++t_;
  if (config_.kind == OptimizerConfig::Kind::kSgd) {
    params -= config_.learning_rate * grad;
    return;
  }
  m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
  v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  params.array() -= config_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.epsilon);
}

}  // namespace boltzlab
