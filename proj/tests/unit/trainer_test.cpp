#include "boltzlab/trainer.hpp"

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "boltzlab/optimizer.hpp"

using namespace boltzlab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

FlowModel tiny_model(int dim, std::uint64_t seed) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.blocks = 2;
  cfg.hidden = 8;
  Rng rng(seed);
  return FlowModel::initialized(cfg, rng);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.iters = 10;
  c.batch_size = 32;
  c.eval_every = 4;
  c.eval_samples = 1000;
  c.seed = 3;
  return c;
}

class NanEnergy final : public EnergyModel {
 public:
  int dim() const override { return 2; }
  std::string id() const override { return "nan"; }
  using EnergyModel::energy;
  double energy_point(std::span<const double>) const override { return std::numeric_limits<double>::quiet_NaN(); }
  ad::Var energy(ad::Var x) const override {
    return ad::row_sum(x) * std::numeric_limits<double>::quiet_NaN();
  }
};

}  // namespace

TEST(Optimizer, AdamFirstStepIsLearningRateTimesSign) {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  Optimizer opt(cfg, 3);
  VectorXd p = VectorXd::Zero(3);
  opt.step(p, (VectorXd(3) << 2.0, -0.5, 0.0).finished());
  // lr * g / (|g| + eps) after bias correction.
  EXPECT_DOUBLE_EQ(p(0), -0.1 * 2.0 / (2.0 + 1e-8));
  EXPECT_DOUBLE_EQ(p(1), 0.1 * 0.5 / (0.5 + 1e-8));
  EXPECT_EQ(p(2), 0.0);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Optimizer, SgdAndValidation) {
  OptimizerConfig cfg;
  cfg.kind = OptimizerConfig::Kind::kSgd;
  cfg.learning_rate = 0.5;
  Optimizer opt(cfg, 2);
  VectorXd p = VectorXd::Ones(2);
  opt.step(p, VectorXd::Constant(2, 2.0));
  EXPECT_EQ(p, VectorXd::Zero(2));
  EXPECT_THROW(opt.step(p, VectorXd::Zero(3)), std::invalid_argument);
  EXPECT_EQ(parse_optimizer_kind(optimizer_name(OptimizerConfig::Kind::kAdam)), OptimizerConfig::Kind::kAdam);
  EXPECT_THROW((void)parse_optimizer_kind("rmsprop"), std::invalid_argument);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Evaluate, IdentityFlowOnItsBase) {
  const FlowModel model = tiny_model(3, 1);
  const GaussianEnergy target(3, 1.0);
  Rng rng(2);
  const Index n = 20000;
  const MetricsRecord m = evaluate(model, target, n, {0.0, true}, rng);
  EXPECT_NEAR(m.minor_mode_fraction, 0.5, 3.0 * std::sqrt(0.25 / n));
  EXPECT_NEAR(m.ess, static_cast<double>(n), 1e-6 * n);
  EXPECT_NEAR(m.K_estimate, 1.5 * std::log(2.0 * M_PI), 1e-12);
  EXPECT_NEAR(m.logZ_hat, 1.5 * std::log(2.0 * M_PI), 1e-12);
  EXPECT_THROW((void)evaluate(model, target, 999, {}, rng), std::invalid_argument);
}

TEST(ModeSplit, SaddleForDoubleWell) {
  const DoubleWell dw;
  const ModeSplit s = default_mode_split(dw);
  EXPECT_EQ(s.threshold, dw.geometry().saddle);
  EXPECT_TRUE(s.minor_is_right);
  EXPECT_EQ(default_mode_split(GaussianEnergy(2, 1.0)).threshold, 0.0);
}

TEST(Metrics, JsonLine) {
  MetricsRecord r;
  r.iter = 7;
  r.loss_value = 0.1;
  r.ess = std::numeric_limits<double>::quiet_NaN();
  r.logZ_hat = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(to_json_line(r),
            "{\"iter\":7,\"loss_value\":0.10000000000000001,\"minor_mode_fraction\":0,\"mean_UB\":0,"
            "\"K_estimate\":0,\"ess\":null,\"logZ_hat\":null,\"grad_norm\":0,\"wall_ms\":0}");
}

TEST(Finetune, EvaluationCadenceAndTrace) {
  DoubleWellParams p;
  p.dim = 2;
  const DoubleWell target(p);
  std::vector<Index> seen;
  const TrainResult r =
      finetune(tiny_model(2, 4), target, quick_config(), [&](const MetricsRecord& m) { seen.push_back(m.iter); });
  EXPECT_EQ(seen, (std::vector<Index>{0, 4, 8, 10}));
  ASSERT_EQ(r.metrics.size(), 4u);
  EXPECT_TRUE(std::isnan(r.metrics[0].loss_value));
  EXPECT_EQ(r.trace.loss.size(), 10u);
  EXPECT_EQ(r.trace.K_estimate.size(), 10u);
  EXPECT_EQ(r.trace.mean_UB.size(), 10u);
  for (const MetricsRecord& m : r.metrics) {
    EXPECT_EQ(m.wall_ms, 0.0);
  }
}

TEST(Finetune, DeterministicForFixedSeed) {
  DoubleWellParams p;
  p.dim = 2;
  const DoubleWell target(p);
  for (const LossKind kind : {LossKind::kKlx, LossKind::kKlzDf, LossKind::kL2Masked}) {
    TrainConfig cfg = quick_config();
    cfg.loss.kind = kind;
    const TrainResult a = finetune(tiny_model(2, 5), target, cfg);
    const TrainResult b = finetune(tiny_model(2, 5), target, cfg);
    EXPECT_EQ(a.model.parameters(), b.model.parameters()) << loss_name(kind);
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      EXPECT_EQ(to_json_line(a.metrics[i]), to_json_line(b.metrics[i]));
    }
    EXPECT_NE(a.model.parameters(), tiny_model(2, 5).parameters());
  }
}

TEST(Finetune, TrickMatchesPlainGradientOnFirstStep) {
  DoubleWellParams p;
  p.dim = 2;
  const DoubleWell target(p);
  for (const LossKind kind : {LossKind::kKlzDf, LossKind::kL2Masked}) {
    TrainConfig cfg = quick_config();
    cfg.iters = 1;
    cfg.loss.kind = kind;
    const TrainResult plain = finetune(tiny_model(2, 6), target, cfg);
    cfg.trick_enabled = true;
    const TrainResult trick = finetune(tiny_model(2, 6), target, cfg);
    EXPECT_LE((plain.model.parameters() - trick.model.parameters()).cwiseAbs().maxCoeff(), 1e-12) << loss_name(kind);
    cfg.iters = 5;
    const TrainResult longer = finetune(tiny_model(2, 6), target, cfg);
    EXPECT_TRUE(longer.model.parameters().allFinite());
  }
  TrainConfig cfg = quick_config();
  cfg.loss.kind = LossKind::kKlx;
  cfg.trick_enabled = true;
  EXPECT_THROW((void)finetune(tiny_model(2, 6), target, cfg), std::invalid_argument);
}

TEST(Finetune, RejectsBadInputs) {
  const DoubleWell target;
  TrainConfig cfg = quick_config();
  EXPECT_THROW((void)finetune(tiny_model(2, 7), target, cfg), std::invalid_argument);
  DoubleWellParams p;
  p.dim = 2;
  const DoubleWell small(p);
  cfg.loss.kind = LossKind::kKlz;
  EXPECT_THROW((void)finetune(tiny_model(2, 7), small, cfg), std::invalid_argument);
  cfg = quick_config();
  cfg.eval_samples = 10;
  EXPECT_THROW((void)finetune(tiny_model(2, 7), small, cfg), std::invalid_argument);
  cfg = quick_config();
  cfg.fraction = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Finetune, AbortsOnNonFiniteLossWithLastGoodModel) {
  const NanEnergy target;
  const FlowModel start = tiny_model(2, 8);
  TrainConfig cfg = quick_config();
  cfg.loss.kind = LossKind::kKlx;
  try {
    (void)finetune(start, target, cfg);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.iter(), 1);
    EXPECT_EQ(e.last_good().parameters(), start.parameters());
    EXPECT_EQ(e.batch().rows(), cfg.batch_size);
  }
}

TEST(Pretrain, FitsShiftedGaussianData) {
  Rng rng(9);
  MatrixXd data = rng.normal_matrix(2000, 2, 0.5);
  data.col(0).array() += 1.0;
  const GaussianEnergy target(2, 1.0);
  TrainConfig cfg = quick_config();
  cfg.phase = Phase::kPretrain;
  cfg.iters = 300;
  cfg.eval_every = 100;
  cfg.optimizer.learning_rate = 1e-2;
  const TrainResult r = pretrain(tiny_model(2, 10), data, target, cfg);
  const double start = r.trace.loss.front();
  double tail = 0.0;
  for (std::size_t i = r.trace.loss.size() - 50; i < r.trace.loss.size(); ++i) {
    tail += r.trace.loss[i] / 50.0;
  }
  EXPECT_LT(tail, start - 0.5);
  EXPECT_TRUE(r.trace.K_estimate.empty());
  EXPECT_EQ(r.metrics.size(), 4u);
  EXPECT_THROW((void)pretrain(tiny_model(3, 10), data, target, cfg), std::invalid_argument);
}

TEST(Pretrain, FractionShortensRun) {
  Rng rng(11);
  const MatrixXd data = rng.normal_matrix(100, 2);
  const GaussianEnergy target(2, 1.0);
  TrainConfig cfg = quick_config();
  cfg.iters = 50;
  cfg.fraction = 0.1;
  EXPECT_EQ(cfg.effective_iters(), 5);
  const TrainResult r = pretrain(tiny_model(2, 12), data, target, cfg);
  EXPECT_EQ(r.trace.loss.size(), 5u);
}

TEST(Checkpointing, ReloadedModelEvaluatesIdentically) {
  DoubleWellParams p;
  p.dim = 2;
  const DoubleWell target(p);
  const TrainResult r = finetune(tiny_model(2, 13), target, quick_config());
  const FlowModel back = checkpoint_from_string(checkpoint_to_string(r.model));
  Rng a(14);
  Rng b(14);
  EXPECT_EQ(to_json_line(evaluate(r.model, target, 2000, default_mode_split(target), a)),
            to_json_line(evaluate(back, target, 2000, default_mode_split(target), b)));
}
