#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "boltzlab/estimators.hpp"
#include "boltzlab/flow.hpp"
#include "boltzlab/losses.hpp"
#include "boltzlab/targets.hpp"
#include "test_support.hpp"

namespace boltzlab::oracle {

struct GradientPair {
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
};

inline FlowModel gradient_suite_model(std::uint64_t seed) {
  FlowConfig cfg;
  cfg.dim = 2;
  cfg.blocks = 2;
  cfg.hidden = 6;
  Rng rng(seed);
  return FlowModel::randomized(cfg, rng, 0.7);
}

/// Taped gradient of one loss against a five-point numeric oracle that re-evaluates
/// the loss on the numeric flow path with every detached quantity frozen.
inline GradientPair loss_gradients(const LossConfig& config, Index n, std::uint64_t seed) {
  const FlowModel model = gradient_suite_model(seed);
  DoubleWellParams dwp;
  dwp.dim = 2;
  const DoubleWell target(dwp);
  Rng rng(seed + 1000);
  Batch batch = generate_batch(model, target, rng, n);
  if (config.kind == LossKind::kKlz) {
    batch.x = rng.normal_matrix(n, 2, 1.5);
  }

  ad::Tape tape;
  const BoundFlow flow(model, tape);
  const LossOutput loss = compute_loss(flow, batch, target, config);
  GradientPair out;
  out.analytic = ad::backward(loss.value, flow.parameters());

  const double sigma = model.config().sigma;
  const Eigen::VectorXd log_w = batch.log_ptB - batch.log_pG;
  const Eigen::VectorXd w = config.self_normalize ? Eigen::VectorXd((log_w.array() - log_mean_exp(log_w)).exp())
                                                  : Eigen::VectorXd(log_w.array().exp());
  const Eigen::VectorXd r0 = batch.log_ptB - model.log_prob(batch.x);
  const double k_frozen = r0.mean();
  // The mask pattern is frozen too: (d)_+^2 and 1[d0 > 0] d^2 share their gradient at
  // d0, and the second form stays smooth when some d0 sits on the kink (n = 1).
  const Eigen::ArrayXd active = (r0.array() > k_frozen).cast<double>();
  const auto value = [&](const Eigen::VectorXd& p) {
    FlowModel m = model;
    m.set_parameters(p);
    switch (config.kind) {
      case LossKind::kKlz: {
        const FlowOutput inv = m.invert(batch.x);
        return (inv.points.rowwise().squaredNorm() / (2.0 * sigma * sigma) - inv.logdet).mean();
      }
      case LossKind::kKlx: {
        const FlowOutput gen = m.generate(batch.z);
        return (target.energy(gen.points) - gen.logdet).mean();
      }
      case LossKind::kKlzDf: {
        const FlowOutput inv = m.invert(batch.x);
        const Eigen::VectorXd terms = inv.points.rowwise().squaredNorm() / (2.0 * sigma * sigma) - inv.logdet;
        return terms.cwiseProduct(w).mean();
      }
      case LossKind::kL2Masked: {
        const Eigen::VectorXd r = batch.log_ptB - m.log_prob(batch.x);
        const double k = config.detach_k ? k_frozen : r.mean();
        Eigen::ArrayXd dev = r.array() - k;
        if (config.apply_mask) {
          dev = dev * active;
        }
        return dev.square().mean();
      }
    }
    return 0.0;
  };
  out.numeric = five_point_differences(value, model.parameters(), 1e-4);
  return out;
}

}  // namespace boltzlab::oracle
