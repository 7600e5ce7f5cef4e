#include "boltzlab/pitfalls.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "boltzlab/estimators.hpp"

namespace boltzlab::pitfalls {

void GridDensity::validate() const {
  if (grid.size() != q.size() || q.size() != p.size()) {
    throw std::invalid_argument("grid density: grid, q and p must have equal length");
  }
  if ((q.array() <= 0.0).any()) {
    throw std::invalid_argument("grid density: q must be positive");
  }
  if ((p.array() < 0.0).any()) {
    throw std::invalid_argument("grid density: p must be non-negative");
  }
}

Eigen::VectorXd unconstrained_kl_flow(const GridDensity& density, double T, double dt) {
  density.validate();
  if (!(dt > 0.0) || !(T >= 0.0)) {
    throw std::invalid_argument("unconstrained_kl_flow: need dt > 0 and T >= 0");
  }
  const Eigen::ArrayXd p = density.p.array();
  Eigen::ArrayXd q = density.q.array();
  const auto rhs = [&p](const Eigen::ArrayXd& v) -> Eigen::ArrayXd { return p / v; };
  const auto steps = static_cast<long>(std::ceil(T / dt - 1e-9));
  const double h = steps > 0 ? T / static_cast<double>(steps) : 0.0;
  for (long s = 0; s < steps; ++s) {
    const Eigen::ArrayXd k1 = rhs(q);
    const Eigen::ArrayXd k2 = rhs(q + 0.5 * h * k1);
    const Eigen::ArrayXd k3 = rhs(q + 0.5 * h * k2);
    const Eigen::ArrayXd k4 = rhs(q + h * k3);
    q += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if ((q <= 0.0).any()) {
      throw std::logic_error("unconstrained_kl_flow: q left the positive orthant");
    }
  }
  return q.matrix();
}

Eigen::VectorXd unconstrained_kl_flow_closed_form(const GridDensity& density, double T) {
  density.validate();
  return (2.0 * T * density.p.array() + density.q.array().square()).sqrt().matrix();
}

ad::Var naive_minibatch_kl(ad::Var log_pG, const Eigen::VectorXd& log_pB) {
  if (log_pG.rows() != log_pB.size() || log_pG.cols() != 1) {
    throw std::invalid_argument("naive_minibatch_kl: log_pG must be an n x 1 column matching log_pB");
  }
  ad::Tape& tape = log_pG.tape();
  const Eigen::VectorXd pB = log_pB.array().exp();
  return ad::sum(tape.constant(pB) * (tape.constant(log_pB) - log_pG));
}

Eigen::VectorXd naive_minibatch_kl_grad(ad::Var log_pG, const Eigen::VectorXd& log_pB,
                                        std::span<const ad::Var> params) {
  return ad::backward(naive_minibatch_kl(log_pG, log_pB), params);
}

double normalized_minibatch_kl(const Eigen::VectorXd& log_pB, const Eigen::VectorXd& log_pG) {
  if (log_pB.size() != log_pG.size() || log_pB.size() == 0) {
    throw std::invalid_argument("normalized_minibatch_kl: inputs must be non-empty and of equal length");
  }
  const Eigen::VectorXd lb = log_pB.array() - log_sum_exp(log_pB);
  const Eigen::VectorXd lg = log_pG.array() - log_sum_exp(log_pG);
  return (lb.array().exp() * (lb - lg).array()).sum();
}

ad::Var normalized_minibatch_kl(const Eigen::VectorXd& log_pB, ad::Var log_pG) {
  if (log_pG.rows() != log_pB.size() || log_pG.cols() != 1) {
    throw std::invalid_argument("normalized_minibatch_kl: log_pG must be an n x 1 column matching log_pB");
  }
  ad::Tape& tape = log_pG.tape();
  const Eigen::VectorXd lb = log_pB.array() - log_sum_exp(log_pB);
  const ad::Var lg = log_pG - ad::logsumexp(log_pG);
  return ad::sum(tape.constant(Eigen::VectorXd(lb.array().exp())) * (tape.constant(lb) - lg));
}

NaiveKlTrace naive_kl_demo(FlowModel model, const Eigen::MatrixXd& batch, const Eigen::VectorXd& log_pB, int steps,
                           double learning_rate) {
  if (steps < 0 || !(learning_rate >= 0.0)) {
    throw std::invalid_argument("naive_kl_demo: need steps >= 0 and learning_rate >= 0");
  }
  NaiveKlTrace trace;
  const auto record = [&](const Eigen::VectorXd& log_pG) {
    trace.batch_mass.push_back(log_pG.array().exp().sum());
    trace.normalized_kl.push_back(normalized_minibatch_kl(log_pB, log_pG));
  };
  for (int s = 0; s < steps; ++s) {
    ad::Tape tape;
    const BoundFlow flow(model, tape);
    const ad::Var log_pG = flow.log_prob(tape.constant(batch));
    record(log_pG.value());
    const ad::Var loss = naive_minibatch_kl(log_pG, log_pB);
    trace.naive_kl.push_back(loss.scalar());
    model.set_parameters(model.parameters() - learning_rate * ad::backward(loss, flow.parameters()));
  }
  const Eigen::VectorXd final_log_pG = model.log_prob(batch);
  record(final_log_pG);
  trace.naive_kl.push_back((log_pB.array().exp() * (log_pB - final_log_pG).array()).sum());
  return trace;
}

ControlVariate::ControlVariate(Index params, double decay)
    : decay_(decay), mean_hc_(Eigen::VectorXd::Zero(params)), mean_cc_(Eigen::VectorXd::Zero(params)) {
  if (!(decay >= 0.0 && decay < 1.0)) {
    throw std::invalid_argument("control variate: decay must be in [0, 1)");
  }
}

void ControlVariate::update(const Eigen::MatrixXd& h, const Eigen::MatrixXd& c) {
  if (h.rows() != c.rows() || h.cols() != mean_hc_.size() || c.cols() != mean_hc_.size() || h.rows() == 0) {
    throw std::invalid_argument("control variate: h and c must be non-empty n x params matrices");
  }
  const Eigen::VectorXd hc = h.cwiseProduct(c).colwise().mean().transpose();
  const Eigen::VectorXd cc = c.cwiseProduct(c).colwise().mean().transpose();
  if (batches_ == 0) {
    mean_hc_ = hc;
    mean_cc_ = cc;
  } else {
    mean_hc_ = decay_ * mean_hc_ + (1.0 - decay_) * hc;
    mean_cc_ = decay_ * mean_cc_ + (1.0 - decay_) * cc;
  }
  ++batches_;
}

void ControlVariate::set_moments(const Eigen::VectorXd& mean_hc, const Eigen::VectorXd& mean_cc) {
  if (mean_hc.size() != mean_hc_.size() || mean_cc.size() != mean_cc_.size()) {
    throw std::invalid_argument("control variate: moment vectors have the wrong length");
  }
  mean_hc_ = mean_hc;
  mean_cc_ = mean_cc;
  batches_ = std::max<Index>(batches_, 1);
}

Eigen::VectorXd ControlVariate::k_star() const {
  Eigen::VectorXd k = Eigen::VectorXd::Zero(mean_hc_.size());
  if (batches_ == 0) {
    return k;
  }
  for (Index j = 0; j < k.size(); ++j) {
    if (mean_cc_(j) >= kMinDenominator) {
      k(j) = -mean_hc_(j) / mean_cc_(j);
    }
  }
  return k;
}

Eigen::VectorXd naive_estimate(const Eigen::MatrixXd& h) { return h.colwise().mean().transpose(); }

Eigen::VectorXd stabilized_estimate(const Eigen::MatrixXd& h, const Eigen::MatrixXd& c, const Eigen::VectorXd& k) {
  if (h.rows() != c.rows() || h.cols() != c.cols() || k.size() != h.cols()) {
    throw std::invalid_argument("stabilized_estimate: shapes of h, c and K disagree");
  }
  return naive_estimate(h) + k.cwiseProduct(naive_estimate(c));
}

SoftmaxSurrogate::SoftmaxSurrogate(Eigen::VectorXd theta, Eigen::VectorXd p) : theta_(std::move(theta)), p_(std::move(p)) {
  if (theta_.size() < 2 || theta_.size() != p_.size()) {
    throw std::invalid_argument("softmax surrogate: theta and p must have equal length >= 2");
  }
  if ((p_.array() < 0.0).any() || std::abs(p_.sum() - 1.0) > 1e-12) {
    throw std::invalid_argument("softmax surrogate: p must be a probability vector");
  }
}

Eigen::VectorXd SoftmaxSurrogate::q() const { return (theta_.array() - log_sum_exp(theta_)).exp().matrix(); }

Eigen::MatrixXd SoftmaxSurrogate::dq() const {
  const Eigen::VectorXd qv = q();
  Eigen::MatrixXd d = -qv * qv.transpose();
  d.diagonal() += qv;
  return d;
}

Eigen::VectorXd SoftmaxSurrogate::f() const { return p_.cwiseQuotient(q()); }

Eigen::VectorXd SoftmaxSurrogate::exact_A() const {
  return (dq().array().colwise() * f().array()).colwise().mean().transpose();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> SoftmaxSurrogate::exact_moments() const {
  const Eigen::ArrayXXd d2 = dq().array().square();
  return {(d2.colwise() * f().array()).colwise().mean().transpose(), d2.colwise().mean().transpose()};
}

Eigen::VectorXd SoftmaxSurrogate::exact_k_star() const {
  const auto [hc, cc] = exact_moments();
  ControlVariate cv(states());
  cv.set_moments(hc, cc);
  return cv.k_star();
}

Eigen::VectorXd SoftmaxSurrogate::predicted_reduction(int n) const {
  const auto [hc, cc] = exact_moments();
  Eigen::VectorXd r = Eigen::VectorXd::Zero(hc.size());
  for (Index j = 0; j < r.size(); ++j) {
    if (cc(j) >= ControlVariate::kMinDenominator) {
      r(j) = hc(j) * hc(j) / cc(j) / n;
    }
  }
  return r;
}

Eigen::MatrixXd SoftmaxSurrogate::h_rows(std::span<const Index> idx) const {
  const Eigen::MatrixXd d = dq();
  const Eigen::VectorXd fv = f();
  Eigen::MatrixXd h(static_cast<Index>(idx.size()), states());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    h.row(static_cast<Index>(i)) = d.row(idx[i]) * fv(idx[i]);
  }
  return h;
}

Eigen::MatrixXd SoftmaxSurrogate::c_rows(std::span<const Index> idx) const {
  const Eigen::MatrixXd d = dq();
  Eigen::MatrixXd c(static_cast<Index>(idx.size()), states());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    c.row(static_cast<Index>(i)) = d.row(idx[i]);
  }
  return c;
}

EnumerationReport enumerate_minibatches(const SoftmaxSurrogate& s, int n, const Eigen::VectorXd& k) {
  if (n < 1) {
    throw std::invalid_argument("enumerate_minibatches: n must be >= 1");
  }
  const Index m = s.states();
  Index total = 1;
  for (int i = 0; i < n; ++i) {
    if (total > (Index{1} << 24) / m) {
      throw std::invalid_argument("enumerate_minibatches: too many minibatches to enumerate");
    }
    total *= m;
  }
  const Eigen::MatrixXd d = s.dq();
  const Eigen::VectorXd fv = s.f();
  EnumerationReport r;
  r.minibatches = total;
  r.exact_A = s.exact_A();
  Eigen::VectorXd sum_n = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd sum_n2 = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd sum_s = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd sum_s2 = Eigen::VectorXd::Zero(m);
  std::vector<Index> idx(static_cast<std::size_t>(n), 0);
  for (Index b = 0; b < total; ++b) {
    Index code = b;
    for (int i = 0; i < n; ++i) {
      idx[static_cast<std::size_t>(i)] = code % m;
      code /= m;
    }
    Eigen::VectorXd hf = Eigen::VectorXd::Zero(m);
    Eigen::VectorXd cs = Eigen::VectorXd::Zero(m);
    for (const Index i : idx) {
      hf += d.row(i).transpose() * fv(i);
      cs += d.row(i).transpose();
    }
    const Eigen::VectorXd naive = hf / n;
    const Eigen::VectorXd stab = (hf + k.cwiseProduct(cs)) / n;
    sum_n += naive;
    sum_n2 += naive.cwiseAbs2();
    sum_s += stab;
    sum_s2 += stab.cwiseAbs2();
  }
  const double t = static_cast<double>(total);
  r.naive_mean = sum_n / t;
  r.stabilized_mean = sum_s / t;
  r.naive_var = (sum_n2 / t - r.naive_mean.cwiseAbs2()).cwiseMax(0.0);
  r.stabilized_var = (sum_s2 / t - r.stabilized_mean.cwiseAbs2()).cwiseMax(0.0);
  return r;
}

MassReport mass_change(const SoftmaxSurrogate& s, int n, const Eigen::VectorXd& k, double learning_rate,
                       Index minibatches, Rng& rng) {
  if (n < 1 || minibatches < 2) {
    throw std::invalid_argument("mass_change: need n >= 1 and at least two minibatches");
  }
  const Eigen::MatrixXd d = s.dq();
  const Eigen::VectorXd fv = s.f();
  const auto m = static_cast<std::uint64_t>(s.states());
  double sum = 0.0;
  double sum2 = 0.0;
  for (Index b = 0; b < minibatches; ++b) {
    Eigen::VectorXd hf = Eigen::VectorXd::Zero(s.states());
    Eigen::VectorXd cs = Eigen::VectorXd::Zero(s.states());
    for (int i = 0; i < n; ++i) {
      const auto state = static_cast<Index>(rng.below(m));
      hf += d.row(state).transpose() * fv(state);
      cs += d.row(state).transpose();
    }
    const double delta = learning_rate * cs.dot(hf + k.cwiseProduct(cs));
    sum += delta;
    sum2 += delta * delta;
  }
  const double nb = static_cast<double>(minibatches);
  MassReport r;
  r.minibatches = minibatches;
  r.mean = sum / nb;
  const double var = std::max(0.0, (sum2 - nb * r.mean * r.mean) / (nb - 1.0));
  r.std_error = std::sqrt(var / nb);
  return r;
}

ControlVariate warm_control_variate(const SoftmaxSurrogate& s, int n, Index warmup, Rng& rng, double decay) {
  ControlVariate cv(s.states(), decay);
  const auto m = static_cast<std::uint64_t>(s.states());
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index b = 0; b < warmup; ++b) {
    for (auto& i : idx) {
      i = static_cast<Index>(rng.below(m));
    }
    cv.update(s.h_rows(idx), s.c_rows(idx));
  }
  return cv;
}

}  // namespace boltzlab::pitfalls
