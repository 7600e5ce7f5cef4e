#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "boltzlab/rng.hpp"
#include "boltzlab/targets.hpp"

namespace boltzlab {

/// One Metropolis-Hastings step with a Gaussian random-walk proposal on the full
/// vector. Accepts with probability min(1, exp(-dU / T)); dU <= 0 is accepted
/// without consuming a uniform draw. Updates `x` and `energy` in place.
bool mh_step(Eigen::VectorXd& x, double& energy, const EnergyModel& target, double proposal_std, double temperature,
             Rng& rng);

struct PTConfig {
  /// Ascending ladder starting at 1; samples come from the T = 1 chain only.
  std::vector<double> temperatures = geometric_ladder(6, 10.0);
  int steps_per_exchange = 10;
  /// One value per temperature; empty means 0.5 * sqrt(T).
  std::vector<double> proposal_std;
  Index total_samples = 100000;
  /// MH steps of the base chain discarded before recording.
  Index burn_in = 10000;
  /// Base-chain steps between recorded samples. The wide Gaussian dimensions of
  /// the double well decorrelate slowly under a 0.5 proposal, so the default is long.
  Index thinning = 50;
  std::uint64_t seed = 0;
  bool swaps_enabled = true;
  /// Worker threads for the chains between exchanges. Results do not depend on it.
  int threads = 1;
  /// Starting point shared by every chain; empty means the origin.
  Eigen::VectorXd initial;

  static std::vector<double> geometric_ladder(int count, double t_max);
  std::vector<double> resolved_proposal_std() const;
  void validate() const;
};

struct PTReport {
  std::vector<double> acceptance_rate;
  /// Rate of accepted swaps for each neighbour pair (i, i + 1).
  std::vector<double> swap_rate;
  std::vector<std::string> warnings;
};

struct PTResult {
  Eigen::MatrixXd samples;
  Eigen::VectorXd energies;
  PTReport report;
};

inline constexpr double kLowSwapRate = 0.05;

/// Parallel tempering: one MH chain per temperature, with neighbour swaps
/// attempted in index order every steps_per_exchange steps. Chain i draws from
/// substream i of the seed and the swaps from substream `temperatures.size()`,
/// so serial and threaded runs give identical output.
PTResult pt_run(const PTConfig& config, const EnergyModel& target);

}  // namespace boltzlab
