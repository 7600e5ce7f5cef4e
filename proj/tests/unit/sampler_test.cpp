#include "boltzlab/sampler.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

using namespace boltzlab;
using Eigen::VectorXd;

namespace {

// Piecewise-constant energy on [0, 5): a five-state chain seen through the
// continuous sampler. Bin k has mass proportional to exp(-levels[k]).
class StepEnergy final : public EnergyModel {
 public:
  explicit StepEnergy(std::vector<double> levels) : levels_(std::move(levels)) {}
  int dim() const override { return 1; }
  std::string id() const override { return "steps"; }
  using EnergyModel::energy;
  double energy_point(std::span<const double> x) const override {
    if (!(x[0] >= 0.0 && x[0] < static_cast<double>(levels_.size()))) {
      return std::numeric_limits<double>::infinity();
    }
    return levels_[static_cast<std::size_t>(x[0])];
  }
  ad::Var energy(ad::Var) const override { throw std::logic_error("not differentiable"); }

 private:
  std::vector<double> levels_;
};

double minor_fraction(const PTResult& r, double split) {
  return static_cast<double>((r.samples.col(0).array() > split).count()) / static_cast<double>(r.samples.rows());
}

}  // namespace

TEST(Mh, DownhillMovesAlwaysAccepted) {
  const DoubleWell dw;
  Rng rng(1);
  VectorXd x = VectorXd::Zero(12);
  x(0) = 3.0;
  double e = dw.energy_point({x.data(), 12});
  int moved_down = 0;
  for (int i = 0; i < 200; ++i) {
    const double before = e;
    VectorXd keep = x;
    const bool accepted = mh_step(x, e, dw, 0.3, 1.0, rng);
    if (accepted) {
      EXPECT_EQ(e, dw.energy_point({x.data(), 12}));
      moved_down += e <= before;
    } else {
      EXPECT_EQ(x, keep);
      EXPECT_EQ(e, before);
    }
  }
  EXPECT_GT(moved_down, 0);
}

TEST(Mh, FlatEnergyAcceptsEverything) {
  const GaussianEnergy flat(3, std::numeric_limits<double>::infinity());
  Rng rng(2);
  VectorXd x = VectorXd::Zero(3);
  double e = 0.0;
  for (int i = 0; i < 1000; ++i) {
    EXPECT_TRUE(mh_step(x, e, flat, 2.0, 1.0, rng));
  }
}

TEST(Mh, StandardGaussianMoments) {
  const GaussianEnergy target(1, 1.0);
  Rng rng(3);
  VectorXd x = VectorXd::Zero(1);
  double e = 0.0;
  const int steps = 1000000;
  const int blocks = 100;
  double sum = 0.0;
  double sum2 = 0.0;
  std::vector<double> block_means(blocks, 0.0);
  for (int i = 0; i < steps; ++i) {
    mh_step(x, e, target, 2.4, 1.0, rng);
    sum += x(0);
    sum2 += x(0) * x(0);
    block_means[static_cast<std::size_t>(i / (steps / blocks))] += x(0) / (steps / blocks);
  }
  const double mean = sum / steps;
  double spread = 0.0;
  for (const double m : block_means) {
    spread += (m - mean) * (m - mean);
  }
  const double se = std::sqrt(spread / (blocks - 1) / blocks);
  EXPECT_LE(std::abs(mean), 4.0 * se);
  EXPECT_NEAR(sum2 / steps - mean * mean, 1.0, 0.02);
}

TEST(Pt, SingleTemperatureIsPlainMetropolis) {
  const DoubleWell dw;
  PTConfig cfg;
  cfg.temperatures = {1.0};
  cfg.swaps_enabled = false;
  cfg.total_samples = 200;
  cfg.burn_in = 50;
  cfg.thinning = 3;
  cfg.steps_per_exchange = 7;
  cfg.seed = 11;
  const PTResult r = pt_run(cfg, dw);

  Rng rng = Rng(11).substream(0);
  VectorXd x = VectorXd::Zero(12);
  double e = dw.energy_point({x.data(), 12});
  Eigen::MatrixXd want(200, 12);
  Index recorded = 0;
  for (Index s = 1; recorded < 200; ++s) {
    mh_step(x, e, dw, 0.5, 1.0, rng);
    if (s > 50 && (s - 50) % 3 == 0) {
      want.row(recorded++) = x.transpose();
    }
  }
  EXPECT_EQ(r.samples, want);
  EXPECT_TRUE(r.report.swap_rate.empty());
}

TEST(Pt, ReproducibleAndThreadIndependent) {
  const DoubleWell dw;
  PTConfig cfg;
  cfg.total_samples = 2000;
  cfg.burn_in = 500;
  cfg.seed = 5;
  const PTResult a = pt_run(cfg, dw);
  const PTResult b = pt_run(cfg, dw);
  cfg.threads = 3;
  const PTResult c = pt_run(cfg, dw);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.samples, c.samples);
  EXPECT_EQ(a.energies, c.energies);
  EXPECT_EQ(a.report.swap_rate, c.report.swap_rate);
  EXPECT_EQ(a.report.acceptance_rate, c.report.acceptance_rate);
  EXPECT_EQ(a.report.swap_rate.size(), 5u);
  cfg.seed = 6;
  EXPECT_NE(pt_run(cfg, dw).samples, a.samples);
}

TEST(Pt, DiscreteChainStationaryDistribution) {
  const std::vector<double> levels{0.0, 1.0, 0.3, 2.0, 0.7};
  const StepEnergy target(levels);
  PTConfig cfg;
  cfg.temperatures = PTConfig::geometric_ladder(3, 4.0);
  cfg.proposal_std = {1.0, 1.5, 2.0};
  cfg.initial = VectorXd::Constant(1, 2.5);
  cfg.total_samples = 200000;
  cfg.burn_in = 1000;
  cfg.thinning = 2;
  cfg.seed = 3;
  const PTResult r = pt_run(cfg, target);

  double z = 0.0;
  for (const double l : levels) {
    z += std::exp(-l);
  }
  // Batch means over 50 contiguous blocks absorb the autocorrelation.
  const int blocks = 50;
  const Index per = cfg.total_samples / blocks;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    double sum = 0.0;
    double sum2 = 0.0;
    for (int b = 0; b < blocks; ++b) {
      const auto seg = r.samples.col(0).segment(b * per, per).array();
      const double frac =
          static_cast<double>(((seg >= static_cast<double>(k)) && (seg < static_cast<double>(k + 1))).count()) / per;
      sum += frac;
      sum2 += frac * frac;
    }
    const double mean = sum / blocks;
    const double se = std::sqrt((sum2 / blocks - mean * mean) / (blocks - 1));
    EXPECT_LE(std::abs(mean - std::exp(-levels[k]) / z), 4.0 * se) << "state " << k;
  }
}

TEST(Pt, SymmetricWellSplitsEvenly) {
  DoubleWellParams p;
  p.c = 0.0;
  const DoubleWell dw(p);
  // The sigma = 10 dims decorrelate over ~1000 steps of the 0.5-wide walk, so
  // heavy thinning keeps the batch-means error well inside the band.
  PTConfig cfg;
  cfg.total_samples = 100000;
  cfg.thinning = 500;
  cfg.seed = 7;
  const PTResult r = pt_run(cfg, dw);
  EXPECT_NEAR(minor_fraction(r, 0.0), 0.5, 0.01);
}

TEST(Pt, DefaultWellMatchesQuadratureRatio) {
  const DoubleWell dw;
  const double rho = dw.minor_mode_ratio();
  PTConfig cfg;
  cfg.total_samples = 1000000;
  cfg.seed = 8;
  const PTResult r = pt_run(cfg, dw);
  EXPECT_NEAR(minor_fraction(r, dw.geometry().saddle), rho, 0.05 * rho);
  EXPECT_TRUE(r.report.warnings.empty());
  for (const double a : r.report.acceptance_rate) {
    EXPECT_GT(a, 0.05);
  }
}

TEST(Pt, WarnsOnSparseLadder) {
  const DoubleWell dw;
  PTConfig cfg;
  cfg.temperatures = {1.0, 2000.0};
  cfg.total_samples = 500;
  cfg.burn_in = 0;
  const PTResult r = pt_run(cfg, dw);
  ASSERT_EQ(r.report.swap_rate.size(), 1u);
  EXPECT_LT(r.report.swap_rate[0], kLowSwapRate);
  EXPECT_EQ(r.report.warnings.size(), 1u);
}

TEST(Pt, Validation) {
  const DoubleWell dw;
  PTConfig cfg;
  cfg.temperatures = {2.0, 3.0};
  EXPECT_THROW((void)pt_run(cfg, dw), std::invalid_argument);
  cfg.temperatures = {1.0, 1.0};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.temperatures = {1.0, 2.0};
  cfg.proposal_std = {0.5};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.proposal_std = {};
  cfg.thinning = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.thinning = 1;
  cfg.initial = VectorXd::Zero(3);
  EXPECT_THROW((void)pt_run(cfg, dw), std::invalid_argument);
  const std::vector<double> ladder = PTConfig::geometric_ladder(6, 10.0);
  EXPECT_EQ(ladder.front(), 1.0);
  EXPECT_NEAR(ladder.back(), 10.0, 1e-12);
  EXPECT_THROW((void)PTConfig::geometric_ladder(0, 10.0), std::invalid_argument);
}
