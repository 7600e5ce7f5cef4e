#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "boltzlab/autodiff.hpp"
#include "boltzlab/flow.hpp"
#include "boltzlab/rng.hpp"

namespace boltzlab::pitfalls {

using Eigen::Index;

// ---------------------------------------------------------------------------
// Unconstrained-mass gradient flow

/// A density q evolving towards a target p on a fixed grid.
struct GridDensity {
  Eigen::VectorXd grid;
  Eigen::VectorXd q;
  Eigen::VectorXd p;

  void validate() const;
};

/// Integrates dq/dt = p / q pointwise with classic RK4 from q to time T.
Eigen::VectorXd unconstrained_kl_flow(const GridDensity& density, double T, double dt);
/// sqrt(2 p T + q0^2).
Eigen::VectorXd unconstrained_kl_flow_closed_form(const GridDensity& density, double T);

// ---------------------------------------------------------------------------
// Minibatch KL

/// sum_i p_B(x_i) (log p_B(x_i) - log p_G(x_i)) with no renormalization over the batch.
ad::Var naive_minibatch_kl(ad::Var log_pG, const Eigen::VectorXd& log_pB);
/// Its gradient, -sum_i p_B(x_i) d log p_G(x_i).
Eigen::VectorXd naive_minibatch_kl_grad(ad::Var log_pG, const Eigen::VectorXd& log_pB,
                                        std::span<const ad::Var> params);

/// KL between the two batch-normalized distributions softmax(log_pB) and softmax(log_pG).
double normalized_minibatch_kl(const Eigen::VectorXd& log_pB, const Eigen::VectorXd& log_pG);
ad::Var normalized_minibatch_kl(const Eigen::VectorXd& log_pB, ad::Var log_pG);

struct NaiveKlTrace {
  /// sum_i p_G(x_i) before each step and after the last one.
  std::vector<double> batch_mass;
  std::vector<double> naive_kl;
  std::vector<double> normalized_kl;
};

/// Plain gradient descent on the naive minibatch KL over one fixed batch.
NaiveKlTrace naive_kl_demo(FlowModel model, const Eigen::MatrixXd& batch, const Eigen::VectorXd& log_pB,
                           int steps, double learning_rate);

// ---------------------------------------------------------------------------
// Stabilizing trick

/// Running estimate of K*_j = -<h_j c_j> / <c_j^2> for an estimator mean(h) + K * mean(c),
/// where c is a per-sample control variate with zero expectation.
///
/// With h = (dq/dtheta) f and c = dq/dtheta this is the classical form
/// K* = -<(dq/dtheta)^2 f> / <(dq/dtheta)^2>.
class ControlVariate {
 public:
  static constexpr double kDefaultDecay = 0.99;
  static constexpr double kMinDenominator = 1e-30;

  explicit ControlVariate(Index params, double decay = kDefaultDecay);

  /// Folds one minibatch (rows are samples) into the running means. The first
  /// batch initializes them directly.
  void update(const Eigen::MatrixXd& h, const Eigen::MatrixXd& c);
  /// Replaces the running means by exact moments.
  void set_moments(const Eigen::VectorXd& mean_hc, const Eigen::VectorXd& mean_cc);

  bool warmed_up() const noexcept { return batches_ > 0; }
  Index batches() const noexcept { return batches_; }
  double decay() const noexcept { return decay_; }
  /// Zero for coordinates whose running denominator is below kMinDenominator.
  Eigen::VectorXd k_star() const;

 private:
  double decay_;
  Index batches_ = 0;
  Eigen::VectorXd mean_hc_;
  Eigen::VectorXd mean_cc_;
};

/// (1/n) sum_i h_i.
Eigen::VectorXd naive_estimate(const Eigen::MatrixXd& h);
/// (1/n) [sum_i h_i + K * sum_i c_i], coefficient-wise in K.
Eigen::VectorXd stabilized_estimate(const Eigen::MatrixXd& h, const Eigen::MatrixXd& c, const Eigen::VectorXd& k);

/// Softmax distribution q = softmax(theta) over a finite space with a target p.
/// Points are drawn uniformly, and the gradient of interest is
/// A = E_uniform[(dq/dtheta) f] with f = p / q.
class SoftmaxSurrogate {
 public:
  SoftmaxSurrogate(Eigen::VectorXd theta, Eigen::VectorXd p);

  Index states() const noexcept { return theta_.size(); }
  const Eigen::VectorXd& p() const noexcept { return p_; }
  Eigen::VectorXd q() const;
  /// Row s holds dq(s)/dtheta.
  Eigen::MatrixXd dq() const;
  Eigen::VectorXd f() const;

  Eigen::VectorXd exact_A() const;
  /// E[(dq/dtheta)^2 f] and E[(dq/dtheta)^2] under uniform sampling.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> exact_moments() const;
  Eigen::VectorXd exact_k_star() const;
  /// (1/n) E[dq^2 f]^2 / E[dq^2]: the variance removed by the optimal K.
  Eigen::VectorXd predicted_reduction(int n) const;

  /// h and c rows for the given state indices.
  Eigen::MatrixXd h_rows(std::span<const Index> idx) const;
  Eigen::MatrixXd c_rows(std::span<const Index> idx) const;

 private:
  Eigen::VectorXd theta_;
  Eigen::VectorXd p_;
};

struct EnumerationReport {
  Index minibatches = 0;
  Eigen::VectorXd exact_A;
  Eigen::VectorXd naive_mean;
  Eigen::VectorXd naive_var;
  Eigen::VectorXd stabilized_mean;
  Eigen::VectorXd stabilized_var;
};

/// Exact means and variances over every ordered minibatch of size n.
EnumerationReport enumerate_minibatches(const SoftmaxSurrogate& s, int n, const Eigen::VectorXd& k);

struct MassReport {
  double mean = 0.0;
  double std_error = 0.0;
  Index minibatches = 0;
};

/// Monte-Carlo mean of the batch mass change lr * sum_j (sum_i dq_ij) * A_hat_j,
/// with A_hat the stabilized estimate for the given K (zero K gives the naive one).
MassReport mass_change(const SoftmaxSurrogate& s, int n, const Eigen::VectorXd& k, double learning_rate,
                       Index minibatches, Rng& rng);

/// Warms a ControlVariate with running means over `warmup` random minibatches.
ControlVariate warm_control_variate(const SoftmaxSurrogate& s, int n, Index warmup, Rng& rng,
                                    double decay = ControlVariate::kDefaultDecay);

}  // namespace boltzlab::pitfalls
