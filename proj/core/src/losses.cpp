#include "boltzlab/losses.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "boltzlab/estimators.hpp"

namespace boltzlab {

std::string_view loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::kKlz:
      return "klz";
    case LossKind::kKlx:
      return "klx";
    case LossKind::kKlzDf:
      return "klz_df";
    case LossKind::kL2Masked:
      return "l2_masked";
  }
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  for (const LossKind k : {LossKind::kKlz, LossKind::kKlx, LossKind::kKlzDf, LossKind::kL2Masked}) {
    if (loss_name(k) == name) {
      return k;
    }
  }
  throw std::invalid_argument(fmt::format("unknown loss '{}' (expected klz, klx, klz_df or l2_masked)", name));
}

Batch generate_batch(const FlowModel& model, const EnergyModel& target, Rng& rng, Index n) {
  if (target.dim() != model.dim()) {
    throw std::invalid_argument("generate_batch: target and model dimensions differ");
  }
  FlowSample s = model.sample(rng, n);
  Batch b;
  b.log_ptB = -target.energy(s.x);
  b.x = std::move(s.x);
  b.z = std::move(s.z);
  b.log_pG = std::move(s.log_pG);
  return b;
}

ad::Var loss_klz(const BoundFlow& flow, const Eigen::MatrixXd& x_data) {
  if (x_data.rows() < 1) {
    throw std::invalid_argument("loss_klz: empty batch");
  }
  const double sigma = flow.model().config().sigma;
  const TapedFlowOutput inv = flow.invert(flow.tape().constant(x_data));
  return ad::mean(ad::row_sum(ad::square(inv.points)) * (1.0 / (2.0 * sigma * sigma)) - inv.logdet);
}

ad::Var loss_klx(const BoundFlow& flow, const Eigen::MatrixXd& z, const EnergyModel& target) {
  if (z.rows() < 1) {
    throw std::invalid_argument("loss_klx: empty batch");
  }
  const TapedFlowOutput gen = flow.generate(flow.tape().constant(z));
  return ad::mean(target.energy(gen.points) - gen.logdet);
}

LossOutput weighted_mean(ad::Var terms, const Eigen::VectorXd& log_w, bool self_normalize) {
  if (terms.rows() != log_w.size() || terms.cols() != 1) {
    throw std::invalid_argument("weighted_mean: terms must be an n x 1 column matching the weights");
  }
  LossOutput out;
  out.weights.max_abs_log_weight = log_w.cwiseAbs().maxCoeff();
  out.weights.overflow_warning = out.weights.max_abs_log_weight > kLogWeightWarning;
  Eigen::VectorXd w;
  if (self_normalize) {
    // w / mean(w) in log space; the largest normalized weight is at most n.
    w = (log_w.array() - log_mean_exp(log_w)).exp();
  } else {
    w = log_w.array().exp();
  }
  out.value = ad::mean(terms * terms.tape().constant(w));
  return out;
}

LossOutput loss_klz_df(const BoundFlow& flow, const Batch& batch, const LossConfig& config) {
  if (batch.size() < 1) {
    throw std::invalid_argument("loss_klz_df: empty batch");
  }
  const double sigma = flow.model().config().sigma;
  const TapedFlowOutput inv = flow.invert(flow.tape().constant(batch.x));
  const ad::Var terms = ad::row_sum(ad::square(inv.points)) * (1.0 / (2.0 * sigma * sigma)) - inv.logdet;
  return weighted_mean(terms, batch.log_ptB - batch.log_pG, config.self_normalize);
}

ad::Var masked_l2(ad::Var r, const LossConfig& config) {
  if (r.cols() != 1 || r.rows() < 1) {
    throw std::invalid_argument("masked_l2: r must be a non-empty n x 1 column");
  }
  ad::Var k = ad::mean(r);
  if (config.detach_k) {
    k = ad::detach(k);
  }
  ad::Var dev = r - k;
  if (config.apply_mask) {
    dev = ad::relu(dev);
  }
  return ad::mean(ad::square(dev));
}

ad::Var loss_l2_masked(const BoundFlow& flow, const Batch& batch, const LossConfig& config) {
  if (batch.size() < 1) {
    throw std::invalid_argument("loss_l2_masked: empty batch");
  }
  ad::Tape& tape = flow.tape();
  const ad::Var log_pG = flow.log_prob(tape.constant(batch.x));
  return masked_l2(tape.constant(batch.log_ptB) - log_pG, config);
}

LossOutput compute_loss(const BoundFlow& flow, const Batch& batch, const EnergyModel& target,
                        const LossConfig& config) {
  switch (config.kind) {
    case LossKind::kKlz:
      return {loss_klz(flow, batch.x), {}};
    case LossKind::kKlx:
      return {loss_klx(flow, batch.z, target), {}};
    case LossKind::kKlzDf:
      return loss_klz_df(flow, batch, config);
    case LossKind::kL2Masked:
      return {loss_l2_masked(flow, batch, config), {}};
  }
  throw std::invalid_argument("compute_loss: unknown loss kind");
}

double track_K(const Batch& batch) {
  if (batch.size() < 1) {
    throw std::invalid_argument("track_K: empty batch");
  }
  return (batch.log_ptB - batch.log_pG).mean();
}

}  // namespace boltzlab
