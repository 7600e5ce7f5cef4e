#pragma once

#include <optional>

#include <Eigen/Core>

namespace boltzlab {

using Eigen::Index;

// Importance-sampling estimators over samples x_i ~ p_G. Inputs are per-sample
// log p_G and log p~_B; the log-weights log w = log p~_B - log p_G are never
// exponentiated without first subtracting their maximum.

struct EstimatorReport {
  double Q_hat = 0.0;
  Index n = 0;
  /// Delta-method variance of the self-normalized estimate: sum w~_i^2 (f_i - Q_hat)^2.
  double empirical_variance = 0.0;
  /// (sum w)^2 / sum w^2, in (0, n].
  double ess = 0.0;
  std::optional<double> logZ_hat;
};

/// log(sum exp(v)), -inf for an empty or all -inf vector.
double log_sum_exp(const Eigen::VectorXd& v);
/// log(mean exp(v)).
double log_mean_exp(const Eigen::VectorXd& v);

/// Self-normalized weights w_i / sum_j w_j from log-weights.
Eigen::VectorXd normalized_weights(const Eigen::VectorXd& log_w);
double effective_sample_size(const Eigen::VectorXd& log_w);

/// Q_hat = sum w~_i f_i with self-normalized weights; also fills ess and logZ_hat.
/// Throws when every weight underflows to zero (all log-weights -inf).
EstimatorReport reweighted_expectation(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB,
                                       const Eigen::VectorXd& f);

/// (1/n) sum f_i p_B(x_i) / p_G(x_i) with a normalized log p_B. Unbiased; only
/// usable when Z_B is known, as on discrete surrogates.
double unnormalized_expectation(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_pB,
                                const Eigen::VectorXd& f);

/// log of the mean importance weight, an estimate of log Z_B.
double estimate_logZ(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB);

/// mean((w_i / mean w)^2), optionally times f_i^2. Without f this estimates
/// E_{p_G}[(p_B/p_G)^2] = exp of the order-2 Renyi divergence, which is >= 1.
double variance_loss(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB,
                     const Eigen::VectorXd* f = nullptr);

/// Delta F = -log E_{p_B}[exp(-(U_C - U_B))] with beta = 1, reweighted from p_G.
/// U_C may be +inf at some samples (an excluded region). The result is +inf
/// when every sample is excluded.
double free_energy_difference(const Eigen::VectorXd& log_pG, const Eigen::VectorXd& log_ptB,
                              const Eigen::VectorXd& U_B, const Eigen::VectorXd& U_C);

}  // namespace boltzlab
