// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// The mode-collapse, monotonicity, ablation and free-energy criteria share one set of
// seed-matched desk-scale training runs, which are done first.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/LU>
#include <fmt/core.h>

#include "boltzlab/cli/commands.hpp"
#include "boltzlab/estimators.hpp"
#include "boltzlab/flow.hpp"
#include "boltzlab/losses.hpp"
#include "boltzlab/pitfalls.hpp"
#include "boltzlab/sampler.hpp"
#include "boltzlab/targets.hpp"
#include "boltzlab/trainer.hpp"
#include "gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace boltzlab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  fmt::print("criterion {:>2}  {:<28} {}  {}\n", id, name, pass ? "PASS" : "FAIL", detail);
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

/// Process CPU seconds since `start`.
double cpu_since(std::clock_t start) { return static_cast<double>(std::clock() - start) / CLOCKS_PER_SEC; }

// ---------------------------------------------------------------------------
// Desk-scale experiment

struct Desk {
  static constexpr Index kPretrainIters = 2000;
  static constexpr Index kFinetuneIters = 5000;
  static constexpr double kPartialFraction = 0.1;
  static constexpr double kFinetuneLearningRate = 1e-4;

  DoubleWell target;
  ModeSplit split = default_mode_split(target);
  PTResult data;
  FlowModel initial{flow_config()};

  static FlowConfig flow_config() {
    FlowConfig c;
    c.dim = 12;
    c.blocks = 8;
    c.hidden = 32;
    c.sigma = 3.0;
    c.scale_clamp = 1.0;
    return c;
  }

  static TrainConfig pretrain_config(double fraction) {
    TrainConfig c;
    c.phase = Phase::kPretrain;
    c.loss.kind = LossKind::kKlz;
    c.iters = kPretrainIters;
    c.fraction = fraction;
    c.optimizer.learning_rate = 3e-3;
    c.eval_every = 500;
    c.seed = 3;
    return c;
  }

  static TrainConfig finetune_config(LossKind kind, bool detach_k = true, bool apply_mask = true) {
    TrainConfig c;
    c.loss.kind = kind;
    c.loss.detach_k = detach_k;
    c.loss.apply_mask = apply_mask;
    c.iters = kFinetuneIters;
    c.optimizer.learning_rate = kFinetuneLearningRate;
    c.eval_every = 500;
    c.seed = 4;
    return c;
  }

  Desk() {
    PTConfig pt;
    pt.total_samples = 100000;
    pt.seed = 1;
    data = pt_run(pt, target);
    Rng init(2);
    initial = FlowModel::initialized(flow_config(), init);
  }
};

struct DeskRuns {
  TrainResult partial_klx;
  TrainResult full_l2;
  TrainResult no_detach;
  TrainResult no_mask;
  double collapse_cpu_seconds = 0.0;
};

DeskRuns run_desk(const Desk& desk) {
  const std::clock_t start = std::clock();
  const TrainResult partial =
      pretrain(desk.initial, desk.data.samples, desk.target, Desk::pretrain_config(Desk::kPartialFraction));
  TrainResult partial_klx = finetune(partial.model, desk.target, Desk::finetune_config(LossKind::kKlx));
  const TrainResult full = pretrain(desk.initial, desk.data.samples, desk.target, Desk::pretrain_config(1.0));
  TrainResult full_l2 = finetune(full.model, desk.target, Desk::finetune_config(LossKind::kL2Masked));
  const double seconds = cpu_since(start);
  TrainResult no_detach = finetune(full.model, desk.target, Desk::finetune_config(LossKind::kL2Masked, false, true));
  TrainResult no_mask = finetune(full.model, desk.target, Desk::finetune_config(LossKind::kL2Masked, true, false));
  return {std::move(partial_klx), std::move(full_l2), std::move(no_detach), std::move(no_mask), seconds};
}

double tail_variance(const std::vector<double>& v) {
  const std::size_t start = v.size() * 3 / 4;
  const auto n = static_cast<double>(v.size() - start);
  double mean = 0.0;
  for (std::size_t i = start; i < v.size(); ++i) {
    mean += v[i] / n;
  }
  double var = 0.0;
  for (std::size_t i = start; i < v.size(); ++i) {
    var += (v[i] - mean) * (v[i] - mean) / (n - 1.0);
  }
  return var;
}

// ---------------------------------------------------------------------------
// Criteria

void flow_correctness(const FlowModel& trained) {
  const std::clock_t start = std::clock();
  Rng rng(101);
  FlowConfig cfg = Desk::flow_config();
  const FlowModel random_model = FlowModel::randomized(cfg, rng, 0.5);
  double worst_roundtrip = 0.0;
  double worst_logdet = 0.0;
  for (const FlowModel* model : {&random_model, &trained}) {
    const MatrixXd z = model->base().sample(rng, 1024);
    const FlowOutput gen = model->generate(z);
    worst_roundtrip = std::max(worst_roundtrip, (model->invert(gen.points).points - z).cwiseAbs().maxCoeff());
    const int d = model->dim();
    const double h = 1e-6;
    for (Index i = 0; i < 8; ++i) {
      MatrixXd jac(d, d);
      for (int j = 0; j < d; ++j) {
        MatrixXd up = z.row(i);
        MatrixXd down = z.row(i);
        up(0, j) += h;
        down(0, j) -= h;
        jac.col(j) = ((model->generate(up).points - model->generate(down).points) / (2.0 * h)).transpose();
      }
      const double dense = std::log(std::abs(jac.partialPivLu().determinant()));
      worst_logdet = std::max(worst_logdet, std::abs(gen.logdet(i) - dense) / std::max(1.0, std::abs(dense)));
    }
  }
  const double seconds = cpu_since(start);
  report(1, "flow correctness", worst_roundtrip <= 1e-8 && worst_logdet <= 1e-4 && seconds < 30.0,
         fmt::format("max|F(G(z))-z| {:.2e}, logdet rel err {:.2e}, {:.1f} s", worst_roundtrip, worst_logdet, seconds));
}

void gradient_suite() {
  const std::clock_t start = std::clock();
  int cases = 0;
  int passed = 0;
  for (const Index n : {Index{1}, Index{4}}) {
    for (const LossKind kind : {LossKind::kKlz, LossKind::kKlx, LossKind::kKlzDf, LossKind::kL2Masked}) {
      LossConfig config;
      config.kind = kind;
      const oracle::GradientPair g = oracle::loss_gradients(config, n, 1);
      ++cases;
      passed += oracle::gradient_matches(g.analytic, g.numeric, 1e-5) ? 1 : 0;
    }
  }
  const double seconds = cpu_since(start);
  report(2, "loss gradients", passed == cases && seconds < 60.0,
         fmt::format("{}/{} loss-batch cases within 1e-5, {:.1f} s", passed, cases, seconds));
}

void gibbs_property() {
  Rng rng(301);
  double lowest = 0.0;
  double worst_proportional = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const Index n = 2 + static_cast<Index>(rng.below(31));
    VectorXd a(n);
    VectorXd b(n);
    for (Index i = 0; i < n; ++i) {
      a(i) = 3.0 * rng.normal();
      b(i) = 3.0 * rng.normal();
    }
    lowest = std::min(lowest, pitfalls::normalized_minibatch_kl(a, b));
    const VectorXd shifted = a.array() + 10.0 * rng.normal();
    worst_proportional = std::max(worst_proportional, std::abs(pitfalls::normalized_minibatch_kl(a, shifted)));
  }
  report(3, "normalized minibatch KL", lowest >= -1e-12 && worst_proportional <= 1e-12,
         fmt::format("min {:.2e}, max on proportional pairs {:.2e}", lowest, worst_proportional));
}

void pitfall_flow() {
  pitfalls::GridDensity d;
  d.grid = VectorXd::LinSpaced(64, -4.0, 4.0);
  const double dx = d.grid(1) - d.grid(0);
  d.p = (-0.5 * (d.grid.array() - 1.0).square()).exp();
  d.p /= d.p.sum() * dx;
  d.q = (-0.125 * d.grid.array().square()).exp();
  d.q /= d.q.sum() * dx;
  const VectorXd numeric = pitfalls::unconstrained_kl_flow(d, 10.0, 0.01);
  const VectorXd exact = pitfalls::unconstrained_kl_flow_closed_form(d, 10.0);
  const double err = ((numeric - exact).array() / exact.array()).abs().maxCoeff();
  report(4, "unconstrained KL flow", err <= 1e-6, fmt::format("max rel err {:.2e} at T = 10", err));
}

void estimator_moments() {
  Rng rng(501);
  DiscreteSpace space;
  std::vector<double> f;
  for (int s = 0; s < 16; ++s) {
    space.weights_B.push_back(0.1 + rng.uniform());
    space.weights_G.push_back(0.1 + rng.uniform());
    f.push_back(2.0 * rng.normal());
  }
  const DiscreteMoments m = discrete_exact(space, f);
  const VectorXd pG = space.p_G();
  const VectorXd log_pG = pG.array().log();
  const VectorXd log_pB = space.p_B().array().log();
  std::vector<double> cdf(16);
  double acc = 0.0;
  for (Index s = 0; s < 16; ++s) {
    cdf[static_cast<std::size_t>(s)] = acc += pG(s);
  }
  const int n = 4;
  const int batches = 100000;
  VectorXd lg(n);
  VectorXd lb(n);
  VectorXd fb(n);
  double s1 = 0.0;
  double s2 = 0.0;
  for (int b = 0; b < batches; ++b) {
    for (int i = 0; i < n; ++i) {
      const auto it = std::upper_bound(cdf.begin(), cdf.end() - 1, rng.uniform() * acc);
      const auto s = static_cast<Index>(it - cdf.begin());
      lg(i) = log_pG(s);
      lb(i) = log_pB(s);
      fb(i) = f[static_cast<std::size_t>(s)];
    }
    const double q = unnormalized_expectation(lg, lb, fb);
    s1 += q;
    s2 += q * q;
  }
  const double mean = s1 / batches;
  const double var = s2 / batches - mean * mean;
  const double want_var = (m.second_moment - m.Q * m.Q) / n;
  const double se = std::sqrt(want_var / batches);
  const double z = std::abs(mean - m.Q) / se;
  const double var_err = std::abs(var / want_var - 1.0);
  report(5, "estimator unbiasedness", z <= 3.0 && var_err <= 0.05,
         fmt::format("|mean - Q| = {:.2f} SE, variance off by {:.2f}%", z, 100.0 * var_err));
}

void stabilizing_trick() {
  Rng rng(601);
  VectorXd theta(8);
  VectorXd p(8);
  for (int i = 0; i < 8; ++i) {
    theta(i) = rng.normal();
    p(i) = 0.2 + rng.uniform();
  }
  const pitfalls::SoftmaxSurrogate s(theta, p / p.sum());
  const VectorXd k = s.exact_k_star();
  const pitfalls::EnumerationReport r = pitfalls::enumerate_minibatches(s, 2, k);
  const double bias = (r.stabilized_mean - r.exact_A).cwiseAbs().maxCoeff();
  const bool lower = (r.stabilized_var.array() <= r.naive_var.array() + 1e-15).all();
  const VectorXd predicted = s.predicted_reduction(2);
  double worst_reduction = 0.0;
  for (Index j = 0; j < 8; ++j) {
    const double reduction = r.naive_var(j) - r.stabilized_var(j);
    worst_reduction = std::max(worst_reduction, std::abs(reduction - predicted(j)) / std::max(predicted(j), 1e-300));
  }
  const pitfalls::MassReport mass = pitfalls::mass_change(s, 2, k, 0.1, 200000, rng);
  const double mass_z = std::abs(mass.mean) / mass.std_error;
  report(6, "stabilizing trick", bias <= 1e-10 && lower && worst_reduction <= 0.1 && mass_z <= 3.0,
         fmt::format("bias {:.1e}, variance {}, reduction off by {:.2f}%, mass change {:.2f} SE", bias,
                     lower ? "not increased" : "increased", 100.0 * worst_reduction, mass_z));
}

void mode_collapse(const Desk& desk, const DeskRuns& runs) {
  const double rho = desk.target.minor_mode_ratio();
  const double klx = runs.partial_klx.metrics.back().minor_mode_fraction;
  const double l2 = runs.full_l2.metrics.back().minor_mode_fraction;
  const bool collapsed = klx < 0.2 * rho;
  const bool kept = std::abs(l2 - rho) <= 0.3 * rho;
  report(7, "mode collapse reproduction", collapsed && kept && runs.collapse_cpu_seconds < 600.0,
         fmt::format("rho* {:.4f}; klx {:.4f} (a: {}), l2_masked {:.4f} (b: {}), {:.0f} s", rho, klx,
                     collapsed ? "pass" : "fail", l2, kept ? "pass" : "fail", runs.collapse_cpu_seconds));
}

void k_monotonicity(const DeskRuns& runs) {
  const std::vector<double>& k = runs.full_l2.trace.K_estimate;
  const std::size_t window = 200;
  int violations = 0;
  int windows = 0;
  double worst = 0.0;
  double previous = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s + window <= k.size(); s += window) {
    double mean = 0.0;
    for (std::size_t i = s; i < s + window; ++i) {
      mean += k[i] / static_cast<double>(window);
    }
    double var = 0.0;
    for (std::size_t i = s; i < s + window; ++i) {
      var += (k[i] - mean) * (k[i] - mean) / static_cast<double>(window - 1);
    }
    const double eps = 0.05 * std::sqrt(var);
    if (mean < previous - eps) {
      ++violations;
      worst = std::max(worst, (previous - mean) / eps);
    }
    previous = mean;
    ++windows;
  }
  report(8, "windowed K non-decreasing", violations == 0,
         fmt::format("{} of {} windows drop by more than eps (worst {:.1f} eps)", violations, windows - 1, worst));
}

void ablation_ordering(const DeskRuns& runs) {
  const double full = tail_variance(runs.full_l2.trace.mean_UB);
  const double no_detach = tail_variance(runs.no_detach.trace.mean_UB);
  const double no_mask = tail_variance(runs.no_mask.trace.mean_UB);
  report(9, "ablation ordering", no_detach > full && no_mask > full,
         fmt::format("var(mean U_B) last 25%: full {:.4f}, detach_K=false {:.4f}, apply_mask=false {:.4f}; "
                     "final minor fractions {:.4f}, {:.4f}, {:.4f}",
                     full, no_detach, no_mask, runs.full_l2.metrics.back().minor_mode_fraction,
                     runs.no_detach.metrics.back().minor_mode_fraction,
                     runs.no_mask.metrics.back().minor_mode_fraction));
}

void free_energy(const Desk& desk, const DeskRuns& runs) {
  Rng rng(9);
  const Batch b = generate_batch(runs.full_l2.model, desk.target, rng, 100000);
  const double split = desk.split.threshold;
  const RestrictedEnergy left(desk.target, split, RestrictedEnergy::Side::kLeft);
  const RestrictedEnergy right(desk.target, split, RestrictedEnergy::Side::kRight);
  const VectorXd U_B = -b.log_ptB;
  const double estimate = free_energy_difference(b.log_pG, b.log_ptB, U_B, right.energy(b.x)) -
                          free_energy_difference(b.log_pG, b.log_ptB, U_B, left.energy(b.x));
  const auto [left_mass, right_mass] = desk.target.side_masses(split);
  const double exact = -std::log(right_mass / left_mass);
  const double err = std::abs(estimate / exact - 1.0);
  report(10, "free-energy difference", err <= 0.02,
         fmt::format("dF {:.4f} vs quadrature {:.4f} ({:.2f}%)", estimate, exact, 100.0 * err));

  const VectorXd data_U = desk.target.energy(desk.data.samples);
  const auto [lo, hi] = cli::histogram_range(U_B, &data_U);
  const double overlap =
      cli::overlap_coefficient(cli::make_histogram(U_B, lo, hi, 50), cli::make_histogram(data_U, lo, hi, 50));
  fmt::print("info          U_B histogram overlap with the dataset {:.3f}\n", overlap);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    files[e.path().filename().string()] = buf.str();
  }
  return files;
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / "boltzlab_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path conf = dir / "small.conf";
  std::ofstream(conf) << "[experiment]\nseed = 17\n[target]\ndim = 4\n[model]\nblocks = 2\nhidden = 8\n"
                         "[sampler]\ntotal_samples = 5000\nburn_in = 500\nthinning = 5\nthreads = 2\n"
                         "[pretrain]\niters = 100\neval_every = 50\neval_samples = 2000\n"
                         "[finetune]\niters = 100\neval_every = 50\neval_samples = 2000\n"
                         "[eval]\nsamples = 5000\n";
  const fs::path out = dir / "out";
  const std::string base = fmt::format("{} {{}} --config {} --out {} > /dev/null 2>&1", BOLTZLAB_CLI_PATH,
                                       conf.string(), out.string());
  const std::vector<std::string> commands{
      "sample-data",
      "pretrain",
      fmt::format("finetune --checkpoint {}", (out / "pretrain.ckpt").string()),
      fmt::format("eval --checkpoint {}", (out / "finetune.ckpt").string()),
      "pitfall-demo --mode flow-ode",
      "pitfall-demo --mode naive-kl",
      "pitfall-demo --mode normalized-kl",
      "pitfall-demo --mode stabilizer",
  };
  int identical = 0;
  std::string first_difference;
  for (const std::string& command : commands) {
    const std::string line = fmt::format(fmt::runtime(base), command);
    const int first = std::system(line.c_str());
    const auto before = snapshot(out);
    const int second = std::system(line.c_str());
    const auto after = snapshot(out);
    if (first == 0 && second == 0 && before == after) {
      ++identical;
    } else if (first_difference.empty()) {
      first_difference = fmt::format(", first difference in '{}'", command);
    }
  }
  report(11, "determinism", identical == static_cast<int>(commands.size()),
         fmt::format("{}/{} commands reproduce byte-identical outputs{}", identical, commands.size(),
                     first_difference));
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  fmt::print("training the desk-scale runs...\n");
  std::fflush(stdout);
  const Desk desk;
  const DeskRuns runs = run_desk(desk);

  flow_correctness(runs.full_l2.model);
  gradient_suite();
  gibbs_property();
  pitfall_flow();
  estimator_moments();
  stabilizing_trick();
  mode_collapse(desk, runs);
  k_monotonicity(runs);
  ablation_ordering(runs);
  free_energy(desk, runs);
  determinism();

  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  fmt::print("{} of 11 criteria failed ({:.1f} min)\n", failures, minutes);
  return failures == 0 ? 0 : 1;
}
