#pragma once

#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "boltzlab/autodiff.hpp"

namespace boltzlab {

using Eigen::Index;

/// A reduced energy beta * U_B(x), with beta absorbed. log p~_B(x) = -energy(x);
/// the partition function is never computed.
class EnergyModel {
 public:
  virtual ~EnergyModel() = default;

  virtual int dim() const = 0;
  /// Stable identifier written into dataset headers.
  virtual std::string id() const = 0;

  /// One energy per row of `x`.
  virtual Eigen::VectorXd energy(const Eigen::MatrixXd& x) const;
  /// Energy of a single point of length dim().
  virtual double energy_point(std::span<const double> x) const = 0;
  /// Taped energies of an n x dim batch, as an n x 1 column.
  virtual ad::Var energy(ad::Var x) const = 0;

  Eigen::VectorXd log_unnormalized(const Eigen::MatrixXd& x) const { return -energy(x); }
};

inline constexpr double kNoCap = std::numeric_limits<double>::infinity();

/// Gradient-bounded version of the monomial T(x) = coeff * x^power.
///
/// Equal to T for |x| <= knee, where knee is the point with |T'(knee)| = threshold,
/// and continued linearly with the knee slope beyond it. The result is C1 and its
/// derivative never exceeds the threshold in magnitude. For power 1 the slope
/// itself is clipped to the threshold. An infinite threshold returns T exactly.
double capped_monomial(double coeff, int power, double x, double threshold);
double capped_monomial_derivative(double coeff, int power, double x, double threshold);
ad::Var capped_monomial(double coeff, int power, ad::Var x, double threshold);
/// |x| at which |T'| reaches the threshold; infinity when it never does.
double monomial_knee(double coeff, int power, double threshold);

struct DoubleWellParams {
  int dim = 12;
  double a = 1.0;
  double b = 6.0;
  double c = 1.0;
  double sigma_wide = 10.0;
  /// Per-term gradient bound; kNoCap disables capping.
  double cap_threshold = kNoCap;
};

/// Stationary points of the first-coordinate potential.
struct WellGeometry {
  double left_min = 0.0;
  double saddle = 0.0;
  double right_min = 0.0;
  /// Position of the higher-energy (minor) minimum.
  double minor_min = 0.0;
  /// True when the minor well lies to the right of the saddle.
  bool minor_is_right = true;
};

/// U(x) = a x1^4 - b x1^2 + c x1 + sum_{i>=2} x_i^2 / (2 sigma_wide^2).
class DoubleWell final : public EnergyModel {
 public:
  explicit DoubleWell(const DoubleWellParams& params = {});

  int dim() const override { return params_.dim; }
  std::string id() const override { return "double_well"; }
  using EnergyModel::energy;
  double energy_point(std::span<const double> x) const override;
  ad::Var energy(ad::Var x) const override;

  const DoubleWellParams& params() const noexcept { return params_; }

  /// Uncapped first-coordinate potential and its derivative.
  double u1(double x) const;
  double du1(double x) const;

  /// Solves 4a x^3 - 2b x + c = 0 on the three brackets split by the inflection points.
  WellGeometry geometry() const;
  /// Mass of exp(-U1) on the minor side of the saddle, by adaptive quadrature.
  double minor_mode_ratio() const;
  /// Mass of exp(-U1) on each side of `split`, normalized to sum to one.
  std::pair<double, double> side_masses(double split) const;

 private:
  DoubleWellParams params_;
};

/// Isotropic Gaussian energy sum x_i^2 / (2 sigma^2): the flow base as a target.
class GaussianEnergy final : public EnergyModel {
 public:
  GaussianEnergy(int dim, double sigma);

  int dim() const override { return dim_; }
  std::string id() const override { return "gaussian"; }
  using EnergyModel::energy;
  double energy_point(std::span<const double> x) const override;
  ad::Var energy(ad::Var x) const override;

 private:
  int dim_;
  double sigma_;
};

/// Energy of `inner` plus +infinity wherever x1 is on the excluded side of `split`.
/// Used as the alternate state in free-energy differences; not differentiable.
class RestrictedEnergy final : public EnergyModel {
 public:
  enum class Side { kLeft, kRight };

  RestrictedEnergy(const EnergyModel& inner, double split, Side keep);

  int dim() const override { return inner_->dim(); }
  std::string id() const override;
  using EnergyModel::energy;
  double energy_point(std::span<const double> x) const override;
  /// Throws: restricted energies are evaluation-only.
  ad::Var energy(ad::Var x) const override;

 private:
  const EnergyModel* inner_;
  double split_;
  Side keep_;
};

/// Finite state space with unnormalized masses for the target B and generator G.
struct DiscreteSpace {
  std::vector<double> weights_B;
  std::vector<double> weights_G;

  std::size_t size() const noexcept { return weights_B.size(); }
  void validate() const;
  Eigen::VectorXd p_B() const;
  Eigen::VectorXd p_G() const;
  double Z_B() const;
};

/// Exact moments of the single-sample importance estimator g = f * p_B / p_G under p_G.
struct DiscreteMoments {
  double Q = 0.0;
  /// E_{p_G}[g^2].
  double second_moment = 0.0;
  /// Var of the single-sample estimator, E[g^2] - Q^2. An n-sample mean has variance / n.
  double variance = 0.0;
};

DiscreteMoments discrete_exact(const DiscreteSpace& space, std::span<const double> f);

}  // namespace boltzlab
