#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Core>

namespace boltzlab::oracle {

/// Central finite differences of a scalar function of a flat vector.
inline Eigen::VectorXd central_differences(const std::function<double(const Eigen::VectorXd&)>& fn,
                                           const Eigen::VectorXd& at, double h) {
  Eigen::VectorXd grad(at.size());
  Eigen::VectorXd p = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    p(i) = at(i) + h;
    const double up = fn(p);
    p(i) = at(i) - h;
    const double down = fn(p);
    p(i) = at(i);
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Fourth-order central differences (five-point stencil). With h around 1e-3 the
/// truncation and rounding errors are both near 1e-12 for O(1) functions.
inline Eigen::VectorXd five_point_differences(const std::function<double(const Eigen::VectorXd&)>& fn,
                                              const Eigen::VectorXd& at, double h) {
  Eigen::VectorXd grad(at.size());
  Eigen::VectorXd p = at;
  const auto eval = [&](Eigen::Index i, double step) {
    p(i) = at(i) + step;
    const double v = fn(p);
    p(i) = at(i);
    return v;
  };
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    grad(i) = (eval(i, -2.0 * h) - 8.0 * eval(i, -h) + 8.0 * eval(i, h) - eval(i, 2.0 * h)) / (12.0 * h);
  }
  return grad;
}

/// Gradient check: relative error on coordinates where the analytic gradient
/// exceeds `floor`, and absolute error `floor_abs` elsewhere. Returns true on pass.
inline bool gradient_matches(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric, double rel,
                             double floor = 1e-8, double floor_abs = 1e-7) {
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic(i) - numeric(i));
    if (std::abs(analytic(i)) > floor ? err > rel * std::abs(analytic(i)) : err > floor_abs) {
      return false;
    }
  }
  return true;
}

/// Largest relative error over coordinates whose reference magnitude exceeds `floor`.
inline double max_relative_error(const Eigen::VectorXd& got, const Eigen::VectorXd& want, double floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < want.size(); ++i) {
    if (std::abs(want(i)) > floor) {
      worst = std::max(worst, std::abs(got(i) - want(i)) / std::abs(want(i)));
    }
  }
  return worst;
}

/// Largest absolute error relative to the overall gradient scale.
inline double max_scaled_error(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  const double scale = std::max(want.cwiseAbs().maxCoeff(), 1e-300);
  return (got - want).cwiseAbs().maxCoeff() / scale;
}

}  // namespace boltzlab::oracle
