#include "boltzlab/targets.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>
#include <fmt/format.h>

namespace boltzlab {

namespace {

double ipow(double x, int p) {
  double r = 1.0;
  for (int i = 0; i < p; ++i) {
    r *= x;
  }
  return r;
}

ad::Var ipow(ad::Var x, int p) {
  if (p == 1) {
    return x;
  }
  if (p == 2) {
    return ad::square(x);
  }
  if (p == 4) {
    return ad::square(ad::square(x));
  }
  ad::Var r = x;
  for (int i = 1; i < p; ++i) {
    r = r * x;
  }
  return r;
}

void check_power(int power) {
  if (power < 1) {
    throw std::invalid_argument(fmt::format("capped_monomial: power must be >= 1, got {}", power));
  }
}

}  // namespace

Eigen::VectorXd EnergyModel::energy(const Eigen::MatrixXd& x) const {
  if (x.cols() != dim()) {
    throw std::invalid_argument(fmt::format("energy: expected {} columns, got {}", dim(), x.cols()));
  }
  const Eigen::MatrixXd rows = x.transpose();
  Eigen::VectorXd out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    out(i) = energy_point({rows.col(i).data(), static_cast<std::size_t>(rows.rows())});
  }
  return out;
}

double monomial_knee(double coeff, int power, double threshold) {
  check_power(power);
  if (!(threshold > 0.0)) {
    throw std::invalid_argument("capped_monomial: threshold must be positive");
  }
  if (std::isinf(threshold) || coeff == 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  if (power == 1) {
    return std::abs(coeff) <= threshold ? std::numeric_limits<double>::infinity() : 0.0;
  }
  return std::pow(threshold / (std::abs(coeff) * power), 1.0 / (power - 1));
}

double capped_monomial(double coeff, int power, double x, double threshold) {
  const double knee = monomial_knee(coeff, power, threshold);
  if (std::abs(x) <= knee) {
    return coeff * ipow(x, power);
  }
  if (power == 1) {
    return std::copysign(threshold, coeff) * x;
  }
  const double xc = std::copysign(knee, x);
  return coeff * ipow(xc, power) + coeff * power * ipow(xc, power - 1) * (x - xc);
}

double capped_monomial_derivative(double coeff, int power, double x, double threshold) {
  const double knee = monomial_knee(coeff, power, threshold);
  if (power == 1) {
    return std::abs(coeff) <= threshold ? coeff : std::copysign(threshold, coeff);
  }
  const double xc = std::abs(x) <= knee ? x : std::copysign(knee, x);
  return coeff * power * ipow(xc, power - 1);
}

ad::Var capped_monomial(double coeff, int power, ad::Var x, double threshold) {
  const double knee = monomial_knee(coeff, power, threshold);
  if (std::isinf(knee)) {
    return coeff * ipow(x, power);
  }
  if (power == 1) {
    return std::copysign(threshold, coeff) * x;
  }
  ad::Tape& tape = x.tape();
  const ad::Var lo = tape.constant(-knee);
  // clamp(x, -knee, knee) written with max only; outside the band xc is constant.
  const ad::Var xc = ad::max(-ad::max(-x, lo), lo);
  return coeff * ipow(xc, power) + (coeff * power) * ipow(xc, power - 1) * (x - xc);
}

DoubleWell::DoubleWell(const DoubleWellParams& params) : params_(params) {
  if (params.dim < 1) {
    throw std::invalid_argument("double_well: dim must be >= 1");
  }
  if (!(params.a > 0.0) || !(params.b > 0.0)) {
    throw std::invalid_argument("double_well: coefficients a and b must be positive");
  }
  if (!(params.sigma_wide > 0.0)) {
    throw std::invalid_argument("double_well: sigma_wide must be positive");
  }
  if (!(params.cap_threshold > 0.0)) {
    throw std::invalid_argument("double_well: cap_threshold must be positive (inf disables capping)");
  }
  const double s = std::sqrt(params.b / (6.0 * params.a));
  if (!(du1(-s) > 0.0 && du1(s) < 0.0)) {
    throw std::invalid_argument("double_well: coefficients do not produce two wells");
  }
}

double DoubleWell::u1(double x) const { return params_.a * ipow(x, 4) - params_.b * x * x + params_.c * x; }

double DoubleWell::du1(double x) const { return 4.0 * params_.a * ipow(x, 3) - 2.0 * params_.b * x + params_.c; }

double DoubleWell::energy_point(std::span<const double> x) const {
  const double g = params_.cap_threshold;
  const double x1 = x[0];
  double e = capped_monomial(params_.a, 4, x1, g) + capped_monomial(-params_.b, 2, x1, g) +
             capped_monomial(params_.c, 1, x1, g);
  const double k = 1.0 / (2.0 * params_.sigma_wide * params_.sigma_wide);
  if (std::isinf(g)) {
    for (std::size_t i = 1; i < x.size(); ++i) {
      e += k * x[i] * x[i];
    }
  } else {
    for (std::size_t i = 1; i < x.size(); ++i) {
      e += capped_monomial(k, 2, x[i], g);
    }
  }
  return e;
}

ad::Var DoubleWell::energy(ad::Var x) const {
  if (x.cols() != dim()) {
    throw std::invalid_argument(fmt::format("double_well: expected {} columns, got {}", dim(), x.cols()));
  }
  const double g = params_.cap_threshold;
  const ad::Var x1 = ad::gather_cols(x, {0});
  ad::Var e = capped_monomial(params_.a, 4, x1, g) + capped_monomial(-params_.b, 2, x1, g) +
              capped_monomial(params_.c, 1, x1, g);
  if (dim() > 1) {
    std::vector<Index> rest(static_cast<std::size_t>(dim() - 1));
    std::iota(rest.begin(), rest.end(), Index{1});
    const double k = 1.0 / (2.0 * params_.sigma_wide * params_.sigma_wide);
    e = e + ad::row_sum(capped_monomial(k, 2, ad::gather_cols(x, std::move(rest)), g));
  }
  return e;
}

WellGeometry DoubleWell::geometry() const {
  const double s = std::sqrt(params_.b / (6.0 * params_.a));
  const double bound = 1.0 + std::max(2.0 * params_.b, std::abs(params_.c)) / (4.0 * params_.a);
  boost::math::tools::eps_tolerance<double> tol(52);
  const auto solve = [&](double lo, double hi) {
    std::uintmax_t iters = 200;
    const auto [x0, x1] = boost::math::tools::toms748_solve([this](double x) { return du1(x); }, lo, hi, tol, iters);
    return 0.5 * (x0 + x1);
  };
  WellGeometry g;
  g.left_min = solve(-bound, -s);
  g.saddle = solve(-s, s);
  g.right_min = solve(s, bound);
  g.minor_is_right = u1(g.right_min) > u1(g.left_min);
  g.minor_min = g.minor_is_right ? g.right_min : g.left_min;
  return g;
}

std::pair<double, double> DoubleWell::side_masses(double split) const {
  const WellGeometry g = geometry();
  const double floor = std::min(u1(g.left_min), u1(g.right_min));
  const auto density = [&](double x) { return std::exp(-(u1(x) - floor)); };
  using Quad = boost::math::quadrature::gauss_kronrod<double, 61>;
  const double inf = std::numeric_limits<double>::infinity();
  const double left = Quad::integrate(density, -inf, split, 15, 1e-14);
  const double right = Quad::integrate(density, split, inf, 15, 1e-14);
  const double total = left + right;
  return {left / total, right / total};
}

double DoubleWell::minor_mode_ratio() const {
  const WellGeometry g = geometry();
  const auto [left, right] = side_masses(g.saddle);
  return g.minor_is_right ? right : left;
}

GaussianEnergy::GaussianEnergy(int dim, double sigma) : dim_(dim), sigma_(sigma) {
  if (dim < 1 || !(sigma > 0.0)) {
    throw std::invalid_argument("gaussian: dim must be >= 1 and sigma > 0");
  }
}

double GaussianEnergy::energy_point(std::span<const double> x) const {
  double s = 0.0;
  for (const double v : x) {
    s += v * v;
  }
  return s / (2.0 * sigma_ * sigma_);
}

ad::Var GaussianEnergy::energy(ad::Var x) const {
  return ad::row_sum(ad::square(x)) * (1.0 / (2.0 * sigma_ * sigma_));
}

RestrictedEnergy::RestrictedEnergy(const EnergyModel& inner, double split, Side keep)
    : inner_(&inner), split_(split), keep_(keep) {}

std::string RestrictedEnergy::id() const {
  return fmt::format("{}|{}", inner_->id(), keep_ == Side::kLeft ? "left" : "right");
}

double RestrictedEnergy::energy_point(std::span<const double> x) const {
  const bool inside = keep_ == Side::kLeft ? x[0] <= split_ : x[0] > split_;
  return inside ? inner_->energy_point(x) : std::numeric_limits<double>::infinity();
}

ad::Var RestrictedEnergy::energy(ad::Var) const {
  throw std::logic_error("restricted energy has no gradient; use it for evaluation only");
}

void DiscreteSpace::validate() const {
  if (weights_B.empty()) {
    throw std::invalid_argument("discrete space: empty state list");
  }
  if (weights_B.size() != weights_G.size()) {
    throw std::invalid_argument("discrete space: weights_B and weights_G differ in length");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (!(weights_B[i] > 0.0) || !(weights_G[i] > 0.0) || !std::isfinite(weights_B[i]) ||
        !std::isfinite(weights_G[i])) {
      throw std::invalid_argument(fmt::format("discrete space: weights of state {} must be positive and finite", i));
    }
  }
}

Eigen::VectorXd DiscreteSpace::p_B() const {
  validate();
  Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(weights_B.data(), static_cast<Index>(size()));
  return p / p.sum();
}

Eigen::VectorXd DiscreteSpace::p_G() const {
  validate();
  Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(weights_G.data(), static_cast<Index>(size()));
  return p / p.sum();
}

double DiscreteSpace::Z_B() const {
  validate();
  return std::accumulate(weights_B.begin(), weights_B.end(), 0.0);
}

DiscreteMoments discrete_exact(const DiscreteSpace& space, std::span<const double> f) {
  if (f.size() != space.size()) {
    throw std::invalid_argument("discrete_exact: f must have one value per state");
  }
  const Eigen::VectorXd pb = space.p_B();
  const Eigen::VectorXd pg = space.p_G();
  DiscreteMoments m;
  for (Index i = 0; i < pb.size(); ++i) {
    const double g = f[static_cast<std::size_t>(i)] * pb(i) / pg(i);
    m.Q += pg(i) * g;
    m.second_moment += pg(i) * g * g;
  }
  m.variance = std::max(0.0, m.second_moment - m.Q * m.Q);
  return m;
}

}  // namespace boltzlab
