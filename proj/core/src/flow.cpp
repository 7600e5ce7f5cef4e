#include "boltzlab/flow.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace boltzlab {

namespace {

Eigen::MatrixXd celu_eval(const Eigen::MatrixXd& x, double alpha) {
  return x.unaryExpr([alpha](double v) { return v >= 0.0 ? v : alpha * std::expm1(v / alpha); });
}

Eigen::MatrixXd dense_eval(const DenseLayer& layer, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd y = x * layer.weight;
  y.rowwise() += layer.bias;
  return y;
}

Eigen::MatrixXd mlp_eval(const Mlp& mlp, const Eigen::MatrixXd& x, double alpha) {
  return dense_eval(mlp.output, celu_eval(dense_eval(mlp.hidden, x), alpha));
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& x, const std::vector<Index>& cols) {
  Eigen::MatrixXd out(x.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    out.col(static_cast<Index>(k)) = x.col(cols[k]);
  }
  return out;
}

void scatter(Eigen::MatrixXd& x, const std::vector<Index>& cols, const Eigen::MatrixXd& values) {
  for (std::size_t k = 0; k < cols.size(); ++k) {
    x.col(cols[k]) = values.col(static_cast<Index>(k));
  }
}

Mlp zero_mlp(Index in, Index hidden, Index out) {
  Mlp mlp;
  mlp.hidden.weight = Eigen::MatrixXd::Zero(in, hidden);
  mlp.hidden.bias = Eigen::RowVectorXd::Zero(hidden);
  mlp.output.weight = Eigen::MatrixXd::Zero(hidden, out);
  mlp.output.bias = Eigen::RowVectorXd::Zero(out);
  return mlp;
}

void fill_uniform(Eigen::MatrixXd& m, Rng& rng, double bound) {
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) {
      m(i, j) = bound * (2.0 * rng.uniform() - 1.0);
    }
  }
}

void fill_uniform(Eigen::RowVectorXd& v, Rng& rng, double bound) {
  for (Index j = 0; j < v.size(); ++j) {
    v(j) = bound * (2.0 * rng.uniform() - 1.0);
  }
}

void init_layer(DenseLayer& layer, Rng& rng, double scale) {
  const double bound = scale / std::sqrt(static_cast<double>(layer.weight.rows()));
  fill_uniform(layer.weight, rng, bound);
  fill_uniform(layer.bias, rng, bound);
}

// Visits every parameter array of the model in flat order.
template <typename Model, typename Fn>
void for_each_array(Model& blocks, Fn&& fn) {
  for (auto& block : blocks) {
    for (auto* mlp : {&block.scale_net, &block.shift_net}) {
      fn(mlp->hidden.weight.data(), mlp->hidden.weight.size());
      fn(mlp->hidden.bias.data(), mlp->hidden.bias.size());
      fn(mlp->output.weight.data(), mlp->output.weight.size());
      fn(mlp->output.bias.data(), mlp->output.bias.size());
    }
  }
}

}  // namespace

Eigen::VectorXd BaseDistribution::log_prob(const Eigen::MatrixXd& z) const {
  return (-z.rowwise().squaredNorm() / (2.0 * sigma * sigma)).array() - log_normalizer();
}

ad::Var BaseDistribution::log_prob(ad::Var z) const {
  return ad::row_sum(ad::square(z)) * (-1.0 / (2.0 * sigma * sigma)) - log_normalizer();
}

double BaseDistribution::log_normalizer() const {
  return dim * std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
}

Eigen::MatrixXd BaseDistribution::sample(Rng& rng, Index n) const { return rng.normal_matrix(n, dim, sigma); }

void FlowConfig::validate() const {
  if (dim < 2) {
    throw std::invalid_argument("flow: coupling blocks need dim >= 2");
  }
  if (blocks < 0 || hidden < 1) {
    throw std::invalid_argument("flow: blocks must be >= 0 and hidden >= 1");
  }
  if (!(sigma > 0.0) || !(celu_alpha > 0.0) || !(scale_clamp > 0.0) || !std::isfinite(scale_clamp)) {
    throw std::invalid_argument("flow: sigma, celu_alpha and scale_clamp must be positive and finite");
  }
}

FlowModel::FlowModel(const FlowConfig& config) : config_(config), base_{config.dim, config.sigma} {
  config_.validate();
  blocks_.reserve(static_cast<std::size_t>(config.blocks));
  for (int k = 0; k < config.blocks; ++k) {
    CouplingBlock block;
    for (Index i = 0; i < config.dim; ++i) {
      (i % 2 == k % 2 ? block.frozen : block.transformed).push_back(i);
    }
    const auto in = static_cast<Index>(block.frozen.size());
    const auto out = static_cast<Index>(block.transformed.size());
    block.scale_net = zero_mlp(in, config.hidden, out);
    block.shift_net = zero_mlp(in, config.hidden, out);
    blocks_.push_back(std::move(block));
  }
}

FlowModel FlowModel::initialized(const FlowConfig& config, Rng& rng) {
  FlowModel model(config);
  for (auto& block : model.blocks_) {
    init_layer(block.scale_net.hidden, rng, 1.0);
    init_layer(block.shift_net.hidden, rng, 1.0);
  }
  return model;
}

FlowModel FlowModel::randomized(const FlowConfig& config, Rng& rng, double scale) {
  FlowModel model(config);
  for (auto& block : model.blocks_) {
    for (auto* mlp : {&block.scale_net, &block.shift_net}) {
      init_layer(mlp->hidden, rng, scale);
      init_layer(mlp->output, rng, scale);
    }
  }
  return model;
}

Index FlowModel::parameter_count() const {
  Index total = 0;
  for_each_array(blocks_, [&](const double*, Index size) { total += size; });
  return total;
}

Eigen::VectorXd FlowModel::parameters() const {
  Eigen::VectorXd flat(parameter_count());
  Index offset = 0;
  for_each_array(blocks_, [&](const double* data, Index size) {
    flat.segment(offset, size) = Eigen::Map<const Eigen::VectorXd>(data, size);
    offset += size;
  });
  return flat;
}

void FlowModel::set_parameters(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) {
    throw std::invalid_argument(
        fmt::format("flow: expected {} parameters, got {}", parameter_count(), flat.size()));
  }
  Index offset = 0;
  for_each_array(blocks_, [&](double* data, Index size) {
    Eigen::Map<Eigen::VectorXd>(data, size) = flat.segment(offset, size);
    offset += size;
  });
}

FlowOutput FlowModel::generate(const Eigen::MatrixXd& z) const {
  if (z.cols() != dim()) {
    throw std::invalid_argument(fmt::format("flow.generate: expected {} columns, got {}", dim(), z.cols()));
  }
  FlowOutput out{z, Eigen::VectorXd::Zero(z.rows())};
  const double clamp = config_.scale_clamp;
  for (const CouplingBlock& block : blocks_) {
    const Eigen::MatrixXd frozen = gather(out.points, block.frozen);
    const Eigen::MatrixXd raw = mlp_eval(block.scale_net, frozen, config_.celu_alpha);
    const Eigen::MatrixXd s = clamp * (raw.array() / clamp).tanh();
    const Eigen::MatrixXd t = mlp_eval(block.shift_net, frozen, config_.celu_alpha);
    const Eigen::MatrixXd moved = gather(out.points, block.transformed).cwiseProduct(s.array().exp().matrix()) + t;
    scatter(out.points, block.transformed, moved);
    out.logdet += s.rowwise().sum();
  }
  return out;
}

FlowOutput FlowModel::invert(const Eigen::MatrixXd& x) const {
  if (x.cols() != dim()) {
    throw std::invalid_argument(fmt::format("flow.invert: expected {} columns, got {}", dim(), x.cols()));
  }
  FlowOutput out{x, Eigen::VectorXd::Zero(x.rows())};
  const double clamp = config_.scale_clamp;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    const CouplingBlock& block = *it;
    const Eigen::MatrixXd frozen = gather(out.points, block.frozen);
    const Eigen::MatrixXd raw = mlp_eval(block.scale_net, frozen, config_.celu_alpha);
    const Eigen::MatrixXd s = clamp * (raw.array() / clamp).tanh();
    const Eigen::MatrixXd t = mlp_eval(block.shift_net, frozen, config_.celu_alpha);
    const Eigen::MatrixXd moved = (gather(out.points, block.transformed) - t).cwiseProduct((-s).array().exp().matrix());
    scatter(out.points, block.transformed, moved);
    out.logdet -= s.rowwise().sum();
  }
  return out;
}

Eigen::VectorXd FlowModel::log_prob(const Eigen::MatrixXd& x) const {
  const FlowOutput inv = invert(x);
  Eigen::VectorXd lp = base_.log_prob(inv.points) + inv.logdet;
  if (!lp.allFinite()) {
    throw std::domain_error("flow.log_prob: non-finite log-density");
  }
  return lp;
}

FlowSample FlowModel::sample(Rng& rng, Index n) const {
  FlowSample s;
  s.z = base_.sample(rng, n);
  FlowOutput gen = generate(s.z);
  s.x = std::move(gen.points);
  s.log_pG = base_.log_prob(s.z) - gen.logdet;
  return s;
}

BoundFlow::BoundFlow(const FlowModel& model, ad::Tape& tape) : model_(&model), tape_(&tape) {
  for (const CouplingBlock& block : model.blocks()) {
    BlockVars v;
    v.s_w1 = tape.parameter(block.scale_net.hidden.weight);
    v.s_b1 = tape.parameter(block.scale_net.hidden.bias);
    v.s_w2 = tape.parameter(block.scale_net.output.weight);
    v.s_b2 = tape.parameter(block.scale_net.output.bias);
    v.t_w1 = tape.parameter(block.shift_net.hidden.weight);
    v.t_b1 = tape.parameter(block.shift_net.hidden.bias);
    v.t_w2 = tape.parameter(block.shift_net.output.weight);
    v.t_b2 = tape.parameter(block.shift_net.output.bias);
    params_.insert(params_.end(), {v.s_w1, v.s_b1, v.s_w2, v.s_b2, v.t_w1, v.t_b1, v.t_w2, v.t_b2});
    block_vars_.push_back(v);
  }
}

std::pair<ad::Var, ad::Var> BoundFlow::conditioner(std::size_t block, ad::Var frozen) const {
  const BlockVars& v = block_vars_[block];
  const double alpha = model_->config().celu_alpha;
  const double clamp = model_->config().scale_clamp;
  const ad::Var raw = ad::matmul(ad::celu(ad::matmul(frozen, v.s_w1) + v.s_b1, alpha), v.s_w2) + v.s_b2;
  const ad::Var s = clamp * ad::tanh(raw * (1.0 / clamp));
  const ad::Var t = ad::matmul(ad::celu(ad::matmul(frozen, v.t_w1) + v.t_b1, alpha), v.t_w2) + v.t_b2;
  return {s, t};
}

TapedFlowOutput BoundFlow::generate(ad::Var z) const {
  if (z.cols() != model_->dim()) {
    throw std::invalid_argument("flow.generate: dimension mismatch");
  }
  ad::Var points = z;
  ad::Var logdet = tape_->constant(Eigen::MatrixXd::Zero(z.rows(), 1));
  const auto blocks = model_->blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const CouplingBlock& block = blocks[k];
    const ad::Var frozen = ad::gather_cols(points, block.frozen);
    const auto [s, t] = conditioner(k, frozen);
    const ad::Var moved = ad::gather_cols(points, block.transformed) * ad::exp(s) + t;
    points = ad::merge_cols(frozen, block.frozen, moved, block.transformed);
    logdet = logdet + ad::row_sum(s);
  }
  return {points, logdet};
}

TapedFlowOutput BoundFlow::invert(ad::Var x) const {
  if (x.cols() != model_->dim()) {
    throw std::invalid_argument("flow.invert: dimension mismatch");
  }
  ad::Var points = x;
  ad::Var logdet = tape_->constant(Eigen::MatrixXd::Zero(x.rows(), 1));
  const auto blocks = model_->blocks();
  for (std::size_t k = blocks.size(); k-- > 0;) {
    const CouplingBlock& block = blocks[k];
    const ad::Var frozen = ad::gather_cols(points, block.frozen);
    const auto [s, t] = conditioner(k, frozen);
    const ad::Var moved = (ad::gather_cols(points, block.transformed) - t) * ad::exp(-s);
    points = ad::merge_cols(frozen, block.frozen, moved, block.transformed);
    logdet = logdet - ad::row_sum(s);
  }
  return {points, logdet};
}

ad::Var BoundFlow::log_prob(ad::Var x) const {
  const TapedFlowOutput inv = invert(x);
  return model_->base().log_prob(inv.points) + inv.logdet;
}

}  // namespace boltzlab
