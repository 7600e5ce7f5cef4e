#include "boltzlab/estimators.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

namespace boltzlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const char* what, Index min_n) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(fmt::format("{}: input lengths differ ({} vs {})", what, a.size(), b.size()));
  }
  if (a.size() < min_n) {
    throw std::invalid_argument(fmt::format("{}: need at least {} samples, got {}", what, min_n, a.size()));
  }
}

}  // namespace

double log_sum_exp(const Eigen::VectorXd& v) {
  if (v.size() == 0) {
    return -kInf;
  }
  const double m = v.maxCoeff();
  if (std::isinf(m)) {
    return m;
  }
  return m + std::log((v.array() - m).exp().sum());
}

double log_mean_exp(const Eigen::VectorXd& v) {
  return log_sum_exp(v) - std::log(static_cast<double>(v.size()));
}

Eigen::VectorXd normalized_weights(const Eigen::VectorXd& log_w) {
  const double lse = log_sum_exp(log_w);
  if (!std::isfinite(lse)) {
    throw std::domain_error(
        "importance weights: every weight is zero or infinite; check that log p_G and log p~_B are finite");
  }
  return (log_w.array() - lse).exp();
}

double effective_sample_size(const Eigen::VectorXd& log_w) {
  // (sum w)^2 / sum w^2 = exp(2 lse(l) - lse(2 l)).
  return std::exp(2.0 * log_sum_exp(log_w) - log_sum_exp(2.0 * log_w));
}

EstimatorReport reweighted_expectation(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB,
                                       const Eigen::VectorXd& f) {
  check_pair(log_pG, log_ptB, "reweighted_expectation", 2);
  check_pair(log_pG, f, "reweighted_expectation", 2);
  const Eigen::VectorXd log_w = log_ptB - log_pG;
  const Eigen::VectorXd w = normalized_weights(log_w);
  EstimatorReport r;
  r.n = log_w.size();
  r.Q_hat = w.dot(f);
  r.empirical_variance = (w.array().square() * (f.array() - r.Q_hat).square()).sum();
  r.ess = std::min(effective_sample_size(log_w), static_cast<double>(r.n));
  r.logZ_hat = log_mean_exp(log_w);
  return r;
}

double unnormalized_expectation(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_pB,
                                const Eigen::VectorXd& f) {
  check_pair(log_pG, log_pB, "unnormalized_expectation", 1);
  check_pair(log_pG, f, "unnormalized_expectation", 1);
  return (f.array() * (log_pB - log_pG).array().exp()).mean();
}

double estimate_logZ(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB) {
  check_pair(log_pG, log_ptB, "estimate_logZ", 2);
  return log_mean_exp(log_ptB - log_pG);
}

double variance_loss(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB, const Eigen::VectorXd* f) {
  check_pair(log_pG, log_ptB, "variance_loss", 2);
  const Eigen::VectorXd log_w = log_ptB - log_pG;
  const Eigen::ArrayXd w = (log_w.array() - log_mean_exp(log_w)).exp();
  if (f == nullptr) {
    return w.square().mean();
  }
  check_pair(log_pG, *f, "variance_loss", 2);
  return (w.square() * f->array().square()).mean();
}

double free_energy_difference(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB,
                              const Eigen::VectorXd& U_B, const Eigen::VectorXd& U_C) {
  check_pair(log_pG, log_ptB, "free_energy_difference", 2);
  check_pair(log_pG, U_B, "free_energy_difference", 2);
  check_pair(log_pG, U_C, "free_energy_difference", 2);
  const Eigen::VectorXd log_w = log_ptB - log_pG;
  const double lse_w = log_sum_exp(log_w);
  if (!std::isfinite(lse_w)) {
    throw std::domain_error("free_energy_difference: importance weights are degenerate");
  }
  Eigen::VectorXd terms(log_w.size());
  for (Index i = 0; i < terms.size(); ++i) {
    terms(i) = std::isinf(U_C(i)) && U_C(i) > 0 ? -kInf : log_w(i) - (U_C(i) - U_B(i));
  }
  return -(log_sum_exp(terms) - lse_w);
}

}  // namespace boltzlab
