#include "boltzlab/sampler.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace boltzlab {

bool mh_step(Eigen::VectorXd& x, double& energy, const EnergyModel& target, double proposal_std, double temperature,
             Rng& rng) {
  Eigen::VectorXd proposal(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    proposal(i) = x(i) + proposal_std * rng.normal();
  }
  const double e_new = target.energy_point({proposal.data(), static_cast<std::size_t>(proposal.size())});
  const double delta = e_new - energy;
  if (delta <= 0.0 || rng.uniform() < std::exp(-delta / temperature)) {
    x = std::move(proposal);
    energy = e_new;
    return true;
  }
  return false;
}

std::vector<double> PTConfig::geometric_ladder(int count, double t_max) {
  if (count < 1 || !(t_max >= 1.0)) {
    throw std::invalid_argument("geometric ladder: need count >= 1 and t_max >= 1");
  }
  std::vector<double> t(static_cast<std::size_t>(count), 1.0);
  for (int i = 1; i < count; ++i) {
    t[static_cast<std::size_t>(i)] = std::pow(t_max, static_cast<double>(i) / (count - 1));
  }
  return t;
}

std::vector<double> PTConfig::resolved_proposal_std() const {
  if (!proposal_std.empty()) {
    return proposal_std;
  }
  std::vector<double> s;
  s.reserve(temperatures.size());
  for (const double t : temperatures) {
    s.push_back(0.5 * std::sqrt(t));
  }
  return s;
}

void PTConfig::validate() const {
  if (temperatures.empty() || temperatures.front() != 1.0) {
    throw std::invalid_argument("pt: the temperature ladder must start at 1");
  }
  for (std::size_t i = 1; i < temperatures.size(); ++i) {
    if (!(temperatures[i] > temperatures[i - 1])) {
      throw std::invalid_argument("pt: temperatures must be strictly increasing");
    }
  }
  if (!proposal_std.empty() && proposal_std.size() != temperatures.size()) {
    throw std::invalid_argument("pt: proposal_std needs one value per temperature");
  }
  for (const double s : proposal_std) {
    if (!(s > 0.0)) {
      throw std::invalid_argument("pt: proposal_std must be positive");
    }
  }
  if (steps_per_exchange < 1 || total_samples < 1 || burn_in < 0 || thinning < 1 || threads < 1) {
    throw std::invalid_argument(
        "pt: need steps_per_exchange >= 1, total_samples >= 1, burn_in >= 0, thinning >= 1, threads >= 1");
  }
}

PTResult pt_run(const PTConfig& config, const EnergyModel& target) {
  config.validate();
  const std::size_t chains = config.temperatures.size();
  const int dim = target.dim();
  if (config.initial.size() != 0 && config.initial.size() != dim) {
    throw std::invalid_argument("pt: initial point has the wrong dimension");
  }
  const std::vector<double> stds = config.resolved_proposal_std();
  const Rng root(config.seed);
  std::vector<Rng> rngs;
  for (std::size_t c = 0; c <= chains; ++c) {
    rngs.push_back(root.substream(static_cast<unsigned>(c)));
  }
  Rng& swap_rng = rngs.back();

  const Eigen::VectorXd start = config.initial.size() != 0 ? config.initial : Eigen::VectorXd::Zero(dim);
  std::vector<Eigen::VectorXd> xs(chains, start);
  const double e0 = target.energy_point({start.data(), static_cast<std::size_t>(dim)});
  std::vector<double> es(chains, e0);
  std::vector<Index> accepted(chains, 0);
  std::vector<Index> swaps_tried(chains > 1 ? chains - 1 : 0, 0);
  std::vector<Index> swaps_done(swaps_tried.size(), 0);

  PTResult result;
  result.samples.resize(config.total_samples, dim);
  result.energies.resize(config.total_samples);
  Index recorded = 0;
  Index step = 0;

  const auto run_chain = [&](std::size_t c, Index first_step, Index count) {
    for (Index k = 0; k < count; ++k) {
      if (mh_step(xs[c], es[c], target, stds[c], config.temperatures[c], rngs[c])) {
        ++accepted[c];
      }
      if (c == 0) {
        const Index s = first_step + k + 1;
        if (s > config.burn_in && (s - config.burn_in) % config.thinning == 0 && recorded < config.total_samples) {
          result.samples.row(recorded) = xs[0].transpose();
          result.energies(recorded) = es[0];
          ++recorded;
        }
      }
    }
  };

  const int workers = std::min<int>(config.threads, static_cast<int>(chains));
  while (recorded < config.total_samples) {
    const Index block = config.steps_per_exchange;
    if (workers <= 1) {
      for (std::size_t c = 0; c < chains; ++c) {
        run_chain(c, step, block);
      }
    } else {
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t c = static_cast<std::size_t>(w); c < chains; c += static_cast<std::size_t>(workers)) {
            run_chain(c, step, block);
          }
        });
      }
    }
    step += block;
    if (config.swaps_enabled) {
      for (std::size_t i = 0; i + 1 < chains; ++i) {
        ++swaps_tried[i];
        const double log_a = (1.0 / config.temperatures[i] - 1.0 / config.temperatures[i + 1]) * (es[i] - es[i + 1]);
        if (log_a >= 0.0 || swap_rng.uniform() < std::exp(log_a)) {
          std::swap(xs[i], xs[i + 1]);
          std::swap(es[i], es[i + 1]);
          ++swaps_done[i];
        }
      }
    }
  }

  for (std::size_t c = 0; c < chains; ++c) {
    result.report.acceptance_rate.push_back(static_cast<double>(accepted[c]) / static_cast<double>(step));
  }
  for (std::size_t i = 0; i < swaps_tried.size(); ++i) {
    const double rate =
        swaps_tried[i] > 0 ? static_cast<double>(swaps_done[i]) / static_cast<double>(swaps_tried[i]) : 0.0;
    result.report.swap_rate.push_back(rate);
    if (config.swaps_enabled && rate < kLowSwapRate) {
      result.report.warnings.push_back(
          fmt::format("swap rate {:.4f} between T={} and T={} is below {}; the ladder is too sparse", rate,
                      config.temperatures[i], config.temperatures[i + 1], kLowSwapRate));
    }
  }
  return result;
}

}  // namespace boltzlab
