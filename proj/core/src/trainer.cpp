#include "boltzlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "boltzlab/estimators.hpp"
#include "boltzlab/pitfalls.hpp"

namespace boltzlab {

namespace {

using Clock = std::chrono::steady_clock;

double minor_fraction(const Eigen::MatrixXd& x, const ModeSplit& split) {
  if (x.rows() == 0) {
    return 0.0;
  }
  const auto col = x.col(0).array();
  const auto count = split.minor_is_right ? (col > split.threshold).count() : (col <= split.threshold).count();
  return static_cast<double>(count) / static_cast<double>(x.rows());
}

ModeSplit resolve_split(const EnergyModel& target, const TrainConfig& config) {
  ModeSplit split = default_mode_split(target);
  if (config.mode_threshold) {
    split.threshold = *config.mode_threshold;
  }
  return split;
}

std::string json_number(double v) { return std::isfinite(v) ? fmt::format("{:.17g}", v) : "null"; }

// Rows of `batch` are one sample each; the gradient of the loss is the mean of
// per-sample terms h_i, corrected with the score c_i = d log p_G(x_i) whose
// expectation under p_G is zero.
Eigen::VectorXd stabilized_gradient(const BoundFlow& flow, const Batch& batch, const LossConfig& loss,
                                    pitfalls::ControlVariate& cv) {
  ad::Tape& tape = flow.tape();
  const ad::Var log_pG = flow.log_prob(tape.constant(batch.x));
  ad::Var per_sample;
  switch (loss.kind) {
    case LossKind::kL2Masked: {
      const ad::Var r = tape.constant(batch.log_ptB) - log_pG;
      ad::Var k = ad::mean(r);
      if (loss.detach_k) {
        k = ad::detach(k);
      }
      ad::Var dev = r - k;
      if (loss.apply_mask) {
        dev = ad::relu(dev);
      }
      per_sample = ad::square(dev);
      break;
    }
    case LossKind::kKlzDf: {
      const Eigen::VectorXd log_w = batch.log_ptB - batch.log_pG;
      Eigen::VectorXd w = loss.self_normalize ? Eigen::VectorXd((log_w.array() - log_mean_exp(log_w)).exp())
                                              : Eigen::VectorXd(log_w.array().exp());
      per_sample = -log_pG * tape.constant(w);
      break;
    }
    default:
      throw std::invalid_argument("trick.enabled supports the klz_df and l2_masked losses");
  }
  const Eigen::MatrixXd h = ad::per_sample_gradients(per_sample, flow.parameters());
  const Eigen::MatrixXd c = ad::per_sample_gradients(log_pG, flow.parameters());
  const Eigen::VectorXd grad = pitfalls::stabilized_estimate(h, c, cv.k_star());
  cv.update(h, c);
  return grad;
}

}  // namespace

ModeSplit default_mode_split(const EnergyModel& target) {
  if (const auto* dw = dynamic_cast<const DoubleWell*>(&target)) {
    const WellGeometry g = dw->geometry();
    return {g.saddle, g.minor_is_right};
  }
  return {0.0, true};
}

Index TrainConfig::effective_iters() const {
  return static_cast<Index>(std::llround(static_cast<double>(iters) * fraction));
}

void TrainConfig::validate() const {
  if (iters < 0 || batch_size < 1 || eval_every < 1) {
    throw std::invalid_argument("train: need iters >= 0, batch_size >= 1 and eval_every >= 1");
  }
  if (eval_samples < 1000) {
    throw std::invalid_argument("train: eval_samples must be at least 1000");
  }
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("train: fraction must be in (0, 1]");
  }
  if (!(trick_decay >= 0.0 && trick_decay < 1.0)) {
    throw std::invalid_argument("train: trick_decay must be in [0, 1)");
  }
  optimizer.validate();
}

std::string to_json_line(const MetricsRecord& r) {
  return fmt::format(
      "{{\"iter\":{},\"loss_value\":{},\"minor_mode_fraction\":{},\"mean_UB\":{},\"K_estimate\":{},\"ess\":{},"
      "\"logZ_hat\":{},\"grad_norm\":{},\"wall_ms\":{}}}",
      r.iter, json_number(r.loss_value), json_number(r.minor_mode_fraction), json_number(r.mean_UB),
      json_number(r.K_estimate), json_number(r.ess), json_number(r.logZ_hat), json_number(r.grad_norm),
      json_number(r.wall_ms));
}

TrainingAborted::TrainingAborted(const std::string& what, Index iter, FlowModel last_good, Eigen::MatrixXd batch)
    : std::runtime_error(what), iter_(iter), last_good_(std::move(last_good)), batch_(std::move(batch)) {}

MetricsRecord evaluate(const FlowModel& model, const EnergyModel& target, Index n_eval, const ModeSplit& split,
                       Rng& rng) {
  if (n_eval < 1000) {
    throw std::invalid_argument(fmt::format("evaluate: n_eval must be at least 1000, got {}", n_eval));
  }
  const Batch b = generate_batch(model, target, rng, n_eval);
  const Eigen::VectorXd log_w = b.log_ptB - b.log_pG;
  MetricsRecord r;
  r.minor_mode_fraction = minor_fraction(b.x, split);
  r.mean_UB = -b.log_ptB.mean();
  r.K_estimate = log_w.mean();
  r.ess = effective_sample_size(log_w);
  r.logZ_hat = log_mean_exp(log_w);
  return r;
}

TrainResult pretrain(FlowModel model, const Eigen::MatrixXd& data, const EnergyModel& target, const TrainConfig& config,
                     const MetricsCallback& on_metrics) {
  config.validate();
  if (data.cols() != model.dim()) {
    throw std::invalid_argument(
        fmt::format("pretrain: dataset has dim {} but the model has dim {}", data.cols(), model.dim()));
  }
  if (data.rows() < 1) {
    throw std::invalid_argument("pretrain: empty dataset");
  }
  const ModeSplit split = resolve_split(target, config);
  const Rng root(config.seed);
  Rng rng = root.substream(0);
  Rng eval_rng = root.substream(1);
  Optimizer opt(config.optimizer, model.parameter_count());
  Eigen::VectorXd params = model.parameters();

  TrainResult result{model, {}, {}, {}};
  const Index iters = config.effective_iters();
  const Index n = std::min<Index>(config.batch_size, data.rows());
  std::vector<Index> order(static_cast<std::size_t>(data.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::size_t cursor = order.size();

  double last_loss = std::numeric_limits<double>::quiet_NaN();
  double last_grad = std::numeric_limits<double>::quiet_NaN();
  const auto t0 = Clock::now();
  const auto emit = [&](Index iter) {
    MetricsRecord m = evaluate(result.model, target, config.eval_samples, split, eval_rng);
    m.iter = iter;
    m.loss_value = last_loss;
    m.grad_norm = last_grad;
    if (config.record_timing) {
      m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    result.metrics.push_back(m);
    if (on_metrics) {
      on_metrics(m);
    }
  };
  emit(0);

  Eigen::MatrixXd batch(n, data.cols());
  for (Index it = 1; it <= iters; ++it) {
    for (Index i = 0; i < n; ++i) {
      if (cursor == order.size()) {
        for (std::size_t k = order.size(); k > 1; --k) {
          std::swap(order[k - 1], order[static_cast<std::size_t>(rng.below(k))]);
        }
        cursor = 0;
      }
      batch.row(i) = data.row(order[cursor++]);
    }
    Eigen::VectorXd grad;
    try {
      ad::Tape tape;
      const BoundFlow flow(result.model, tape);
      const ad::Var loss = loss_klz(flow, batch);
      last_loss = loss.scalar();
      grad = ad::backward(loss, flow.parameters());
    } catch (const ad::TapeError& e) {
      throw TrainingAborted(fmt::format("pretrain: numerical failure at iteration {}: {}", it, e.what()), it,
                            result.model, batch);
    }
    if (!std::isfinite(last_loss) || !grad.allFinite()) {
      throw TrainingAborted(fmt::format("pretrain: non-finite loss or gradient at iteration {}", it), it,
                            result.model, batch);
    }
    last_grad = grad.norm();
    result.trace.loss.push_back(last_loss);
    result.trace.grad_norm.push_back(last_grad);
    result.trace.minor_mode_fraction.push_back(minor_fraction(batch, split));
    opt.step(params, grad);
    result.model.set_parameters(params);
    if (it % config.eval_every == 0 || it == iters) {
      emit(it);
    }
  }
  return result;
}

TrainResult finetune(FlowModel model, const EnergyModel& target, const TrainConfig& config,
                     const MetricsCallback& on_metrics) {
  config.validate();
  if (target.dim() != model.dim()) {
    throw std::invalid_argument(
        fmt::format("finetune: target has dim {} but the model has dim {}", target.dim(), model.dim()));
  }
  if (config.loss.kind == LossKind::kKlz) {
    throw std::invalid_argument("finetune: klz needs reference data; use pretrain");
  }
  const ModeSplit split = resolve_split(target, config);
  const Rng root(config.seed);
  Rng rng = root.substream(0);
  Rng eval_rng = root.substream(1);
  Optimizer opt(config.optimizer, model.parameter_count());
  Eigen::VectorXd params = model.parameters();
  pitfalls::ControlVariate cv(model.parameter_count(), config.trick_decay);

  TrainResult result{model, {}, {}, {}};
  const Index iters = config.effective_iters();
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  double last_grad = std::numeric_limits<double>::quiet_NaN();
  const auto t0 = Clock::now();
  const auto emit = [&](Index iter) {
    MetricsRecord m = evaluate(result.model, target, config.eval_samples, split, eval_rng);
    m.iter = iter;
    m.loss_value = last_loss;
    m.grad_norm = last_grad;
    if (config.record_timing) {
      m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    result.metrics.push_back(m);
    if (on_metrics) {
      on_metrics(m);
    }
  };
  emit(0);

  for (Index it = 1; it <= iters; ++it) {
    Batch batch;
    Eigen::VectorXd grad;
    try {
      batch = generate_batch(result.model, target, rng, config.batch_size);
      ad::Tape tape;
      const BoundFlow flow(result.model, tape);
      const LossOutput loss = compute_loss(flow, batch, target, config.loss);
      last_loss = loss.value.scalar();
      if (loss.weights.overflow_warning) {
        result.warnings.push_back(fmt::format("iteration {}: max |log w| = {:.3g} exceeds {}", it,
                                              loss.weights.max_abs_log_weight, kLogWeightWarning));
      }
      grad = config.trick_enabled ? stabilized_gradient(flow, batch, config.loss, cv)
                                  : ad::backward(loss.value, flow.parameters());
    } catch (const ad::TapeError& e) {
      throw TrainingAborted(fmt::format("finetune: numerical failure at iteration {}: {}", it, e.what()), it,
                            result.model, batch.x);
    } catch (const std::domain_error& e) {
      throw TrainingAborted(fmt::format("finetune: numerical failure at iteration {}: {}", it, e.what()), it,
                            result.model, batch.x);
    }
    if (!std::isfinite(last_loss) || !grad.allFinite()) {
      throw TrainingAborted(fmt::format("finetune: non-finite loss or gradient at iteration {}", it), it,
                            result.model, batch.x);
    }
    last_grad = grad.norm();
    result.trace.loss.push_back(last_loss);
    result.trace.K_estimate.push_back(track_K(batch));
    result.trace.mean_UB.push_back(-batch.log_ptB.mean());
    result.trace.grad_norm.push_back(last_grad);
    result.trace.minor_mode_fraction.push_back(minor_fraction(batch.x, split));
    opt.step(params, grad);
    result.model.set_parameters(params);
    if (it % config.eval_every == 0 || it == iters) {
      emit(it);
    }
  }
  return result;
}

}  // namespace boltzlab
