#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "boltzlab/autodiff.hpp"
#include "boltzlab/rng.hpp"

namespace boltzlab {

using Eigen::Index;

/// Isotropic Gaussian q_N with standard deviation `sigma`.
struct BaseDistribution {
  int dim = 1;
  double sigma = 1.0;

  /// log q_N(z) = -sum z_i^2 / (2 sigma^2) - dim * log(sigma * sqrt(2 pi)), one value per row.
  Eigen::VectorXd log_prob(const Eigen::MatrixXd& z) const;
  ad::Var log_prob(ad::Var z) const;
  /// dim * log(sigma * sqrt(2 pi)); the log Z_N constant dropped from the losses.
  double log_normalizer() const;
  Eigen::MatrixXd sample(Rng& rng, Index n) const;
};

struct FlowConfig {
  int dim = 12;
  int blocks = 32;
  int hidden = 64;
  double sigma = 1.0;
  /// Not stated for the reference architecture; 1.0 is the conventional default.
  double celu_alpha = 1.0;
  /// Raw log-scales pass through clamp * tanh(raw / clamp).
  double scale_clamp = 4.0;

  void validate() const;
};

/// y = x * weight + bias, weight is (in x out).
struct DenseLayer {
  Eigen::MatrixXd weight;
  Eigen::RowVectorXd bias;
};

/// Two dense layers separated by a CELU.
struct Mlp {
  DenseLayer hidden;
  DenseLayer output;
};

/// Affine coupling: x[transformed] = z[transformed] * exp(s(z[frozen])) + t(z[frozen]).
struct CouplingBlock {
  std::vector<Index> frozen;
  std::vector<Index> transformed;
  Mlp scale_net;
  Mlp shift_net;
};

struct FlowOutput {
  Eigen::MatrixXd points;
  /// Per-row log|det| of the Jacobian of the applied direction.
  Eigen::VectorXd logdet;
};

struct TapedFlowOutput {
  ad::Var points;
  ad::Var logdet;  // n x 1
};

/// Latent draws pushed through G with their generated log-density.
struct FlowSample {
  Eigen::MatrixXd z;
  Eigen::MatrixXd x;
  Eigen::VectorXd log_pG;
};

/// RealNVP-style stack of affine coupling blocks over a Gaussian base.
///
/// Block k freezes the dims with parity k % 2 and transforms the others, so
/// consecutive blocks alternate between even and odd dims.
///
/// Parameters flatten in block-major order. Within a block the order is
/// scale_net.hidden.{weight,bias}, scale_net.output.{weight,bias},
/// shift_net.hidden.{weight,bias}, shift_net.output.{weight,bias}; every
/// matrix is stored column-major.
class FlowModel {
 public:
  /// Identity flow: every weight and bias is zero.
  explicit FlowModel(const FlowConfig& config);

  /// Hidden layers uniform in +-1/sqrt(fan_in), output layers zero, so the
  /// model starts as the identity map.
  static FlowModel initialized(const FlowConfig& config, Rng& rng);
  /// Every layer uniform in +-scale/sqrt(fan_in); a generic non-identity model.
  static FlowModel randomized(const FlowConfig& config, Rng& rng, double scale = 1.0);

  const FlowConfig& config() const noexcept { return config_; }
  int dim() const noexcept { return config_.dim; }
  const BaseDistribution& base() const noexcept { return base_; }
  std::span<const CouplingBlock> blocks() const noexcept { return blocks_; }
  std::span<CouplingBlock> blocks() noexcept { return blocks_; }

  Index parameter_count() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& flat);

  /// x = G(z) with log|det dG/dz|.
  FlowOutput generate(const Eigen::MatrixXd& z) const;
  /// z = F(x) with log|det dF/dx|.
  FlowOutput invert(const Eigen::MatrixXd& x) const;
  /// log p_G(x) = log q_N(F(x)) + log|det dF/dx|.
  Eigen::VectorXd log_prob(const Eigen::MatrixXd& x) const;
  /// Draws n latents from the base and generates them.
  FlowSample sample(Rng& rng, Index n) const;

 private:
  FlowConfig config_;
  BaseDistribution base_;
  std::vector<CouplingBlock> blocks_;
};

/// A FlowModel whose parameters are leaves of a tape.
class BoundFlow {
 public:
  BoundFlow(const FlowModel& model, ad::Tape& tape);

  const FlowModel& model() const noexcept { return *model_; }
  ad::Tape& tape() const noexcept { return *tape_; }
  /// Parameter leaves in the model's flat order.
  std::span<const ad::Var> parameters() const noexcept { return params_; }

  TapedFlowOutput generate(ad::Var z) const;
  TapedFlowOutput invert(ad::Var x) const;
  /// n x 1 column of log p_G(x).
  ad::Var log_prob(ad::Var x) const;

 private:
  struct BlockVars {
    ad::Var s_w1, s_b1, s_w2, s_b2;
    ad::Var t_w1, t_b1, t_w2, t_b2;
  };

  // Returns (clamped log-scale, shift) for the frozen columns.
  std::pair<ad::Var, ad::Var> conditioner(std::size_t block, ad::Var frozen) const;

  const FlowModel* model_;
  ad::Tape* tape_;
  std::vector<ad::Var> params_;
  std::vector<BlockVars> block_vars_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Text checkpoint: a header of `key value` lines followed by every parameter
/// as a hex-float literal, in FlowModel's flat order. Round-trips bit-exactly.
void save_checkpoint(const FlowModel& model, const std::filesystem::path& path);
std::string checkpoint_to_string(const FlowModel& model);
FlowModel load_checkpoint(const std::filesystem::path& path);
FlowModel checkpoint_from_string(const std::string& text);

}  // namespace boltzlab
