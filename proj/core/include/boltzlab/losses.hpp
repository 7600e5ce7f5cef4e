#pragma once

// Training losses. Every loss is a per-sample mean and drops additive constants
// that do not depend on the parameters:
//   klz       drops log Z_N and the entropy of p_B;
//   klx       drops log Z_B and the entropy of the base distribution;
//   klz_df    drops the same terms as klz; its weights carry Z_B as a global
//             scale unless they are self-normalized;
//   l2_masked only sees differences r_i - K, so log Z_B cancels exactly.

#include <string>
#include <string_view>

#include <Eigen/Core>

#include "boltzlab/autodiff.hpp"
#include "boltzlab/flow.hpp"
#include "boltzlab/rng.hpp"
#include "boltzlab/targets.hpp"

namespace boltzlab {

enum class LossKind { kKlz, kKlx, kKlzDf, kL2Masked };

std::string_view loss_name(LossKind kind);
/// Parses klz | klx | klz_df | l2_masked.
LossKind parse_loss_kind(std::string_view name);

struct LossConfig {
  LossKind kind = LossKind::kL2Masked;
  /// l2_masked: treat the batch mean K as a constant.
  bool detach_k = true;
  /// l2_masked: keep only positive deviations (r - K)_+.
  bool apply_mask = true;
  /// klz_df: divide the detached weights by their batch mean.
  bool self_normalize = true;
};

/// Points with their latent origins and log-densities. For generated batches
/// every field is a plain value, i.e. detached from any tape.
struct Batch {
  Eigen::MatrixXd x;
  Eigen::MatrixXd z;
  Eigen::VectorXd log_pG;
  /// log p~_B = -beta U_B.
  Eigen::VectorXd log_ptB;

  Index size() const noexcept { return x.rows(); }
};

/// Draws n latents, generates them and scores the points under the target.
Batch generate_batch(const FlowModel& model, const EnergyModel& target, Rng& rng, Index n);

/// Weight diagnostics of an importance-weighted loss.
struct WeightReport {
  double max_abs_log_weight = 0.0;
  /// Set when some |log w| exceeds kLogWeightWarning; the loss is still computed.
  bool overflow_warning = false;
};

inline constexpr double kLogWeightWarning = 30.0;

struct LossOutput {
  ad::Var value;
  WeightReport weights;
};

/// mean[ |F(x)|^2 / (2 sigma^2) - log|det dF/dx| ] over a data batch.
ad::Var loss_klz(const BoundFlow& flow, const Eigen::MatrixXd& x_data);

/// mean[ beta U_B(G(z)) - log|det dG/dz| ], differentiated through G.
ad::Var loss_klx(const BoundFlow& flow, const Eigen::MatrixXd& z, const EnergyModel& target);

/// Weighted klz on detached generated points with weights w = p~_B / p_G.
///
/// The weight is a single detached ratio computed from the batch's stored
/// log-densities; with self_normalize it becomes w / mean(w).
LossOutput loss_klz_df(const BoundFlow& flow, const Batch& batch, const LossConfig& config);

/// mean[(r_i - K)_+^2] with r = log p~_B(x) - log p_G(x) on detached points and
/// K the batch mean of r. log p_G is re-evaluated on the tape through F.
ad::Var loss_l2_masked(const BoundFlow& flow, const Batch& batch, const LossConfig& config);

/// Dispatches on config.kind. klz reads batch.x as data; klx reads batch.z.
LossOutput compute_loss(const BoundFlow& flow, const Batch& batch, const EnergyModel& target,
                        const LossConfig& config);

// Loss cores on precomputed per-sample quantities; the flow-level losses above
// are thin wrappers around these.

/// mean(w_i * terms_i) with detached weights built from log_w.
LossOutput weighted_mean(ad::Var terms, const Eigen::VectorXd& log_w, bool self_normalize);

/// L2 loss from the log-ratio column r (n x 1, may depend on parameters).
ad::Var masked_l2(ad::Var r, const LossConfig& config);

/// Batch estimate of K = E_{p_G}[r], up to the constant log Z_B.
double track_K(const Batch& batch);

}  // namespace boltzlab
