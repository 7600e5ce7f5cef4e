#include "boltzlab/cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <string_view>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "boltzlab/cli/config.hpp"
#include "boltzlab/dataset.hpp"
#include "boltzlab/estimators.hpp"
#include "boltzlab/flow.hpp"
#include "boltzlab/losses.hpp"
#include "boltzlab/pitfalls.hpp"
#include "boltzlab/sampler.hpp"
#include "boltzlab/trainer.hpp"

namespace boltzlab::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

/// A usage problem found while running: bad paths, mismatched files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Writer {
 public:
  explicit Writer(const fs::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) {
      throw UsageError(fmt::format("cannot open '{}' for writing", path.string()));
    }
  }
  ~Writer() noexcept(false) {
    out_.flush();
    if (!out_ && std::uncaught_exceptions() == 0) {
      throw UsageError(fmt::format("write to '{}' failed", path_.string()));
    }
  }
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  template <class... Args>
  void line(fmt::format_string<Args...> f, Args&&... args) {
    out_ << fmt::format(f, std::forward<Args>(args)...) << '\n';
  }
  std::ostream& stream() { return out_; }

 private:
  fs::path path_;
  std::ofstream out_;
};

struct Context {
  ExperimentConfig config;
  fs::path out_dir;
  std::ostream& log;
  std::ostream& err;

  fs::path file(std::string_view name) const { return out_dir / name; }
};

Context prepare(const Invocation& inv, std::ostream& log, std::ostream& err) {
  ExperimentConfig config;
  if (inv.config) {
    config = load_config(*inv.config);
  }
  if (inv.seed) {
    config.seed = *inv.seed;
  }
  if (inv.out) {
    config.output_dir = inv.out->string();
  }
  config.resolve();
  Context ctx{config, fs::path(config.output_dir), log, err};
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec) {
    throw UsageError(fmt::format("cannot create output directory '{}': {}", ctx.out_dir.string(), ec.message()));
  }
  Writer(ctx.file(fmt::format("{}.resolved.conf", inv.command))).stream() << config.to_text();
  return ctx;
}

ModeSplit split_for(const EnergyModel& target, const TrainConfig& train) {
  ModeSplit split = default_mode_split(target);
  if (train.mode_threshold) {
    split.threshold = *train.mode_threshold;
  }
  return split;
}

double minor_fraction(const MatrixXd& x, const ModeSplit& split) {
  Index count = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    const bool right = x(i, 0) > split.threshold;
    count += right == split.minor_is_right ? 1 : 0;
  }
  return static_cast<double>(count) / static_cast<double>(x.rows());
}

FlowModel load_model(const Invocation& inv, const ExperimentConfig& config) {
  if (!inv.checkpoint) {
    throw UsageError(fmt::format("{} needs --checkpoint PATH", inv.command));
  }
  if (!fs::exists(*inv.checkpoint)) {
    throw UsageError(fmt::format("checkpoint '{}' does not exist", inv.checkpoint->string()));
  }
  FlowModel model = load_checkpoint(*inv.checkpoint);
  if (model.dim() != config.model.dim) {
    throw UsageError(fmt::format("checkpoint has dim {} but the target has dim {}", model.dim(), config.model.dim));
  }
  return model;
}

Dataset load_data(const ExperimentConfig& config) {
  const fs::path path = config.dataset_path();
  if (!fs::exists(path)) {
    throw UsageError(fmt::format("dataset '{}' does not exist; run sample-data first", path.string()));
  }
  Dataset data = read_dataset(path);
  if (data.dim() != config.model.dim) {
    throw UsageError(fmt::format("dataset has dim {} but the model has dim {}", data.dim(), config.model.dim));
  }
  return data;
}

void write_trace(const fs::path& path, const TrainTrace& trace, bool finetune) {
  Writer w(path);
  if (finetune) {
    w.line("iter,loss,K_estimate,mean_UB,grad_norm,minor_mode_fraction");
    for (std::size_t i = 0; i < trace.loss.size(); ++i) {
      w.line("{},{},{},{},{},{}", i, trace.loss[i], trace.K_estimate[i], trace.mean_UB[i], trace.grad_norm[i],
             trace.minor_mode_fraction[i]);
    }
  } else {
    w.line("iter,loss,grad_norm");
    for (std::size_t i = 0; i < trace.loss.size(); ++i) {
      w.line("{},{},{}", i, trace.loss[i], trace.grad_norm[i]);
    }
  }
}

int cmd_sample_data(const Invocation& inv, Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const auto target = c.make_target();
  PTConfig pt = c.sampler.pt;
  pt.threads = capped_threads(pt.threads);
  const PTResult result = pt_run(pt, *target);
  for (const std::string& w : result.report.warnings) {
    fmt::print(ctx.err, "warning: {}\n", w);
  }

  Dataset data;
  data.x = result.samples;
  data.target_id = target->id();
  data.config_hash = c.data_hash();
  data.seed = c.seed;
  const fs::path path = c.dataset_path();
  write_dataset(data, path, parse_dataset_format(c.sampler.format));

  json report;
  report["dataset"] = path.string();
  report["samples"] = data.count();
  report["dim"] = data.dim();
  report["temperatures"] = pt.temperatures;
  report["acceptance_rate"] = result.report.acceptance_rate;
  report["swap_rate"] = result.report.swap_rate;
  report["warnings"] = result.report.warnings;
  const ModeSplit split = split_for(*target, c.finetune);
  report["mode_threshold"] = split.threshold;
  report["minor_mode_fraction"] = minor_fraction(data.x, split);
  if (const auto* dw = dynamic_cast<const DoubleWell*>(target.get())) {
    report["reference_minor_mode_ratio"] = dw->minor_mode_ratio();
  }
  Writer(ctx.file("sampling_report.json")).stream() << report.dump(2) << '\n';
  fmt::print(ctx.log, "{}: wrote {} samples of dim {} to {} (minor-mode fraction {:.4f})\n", inv.command,
             data.count(), data.dim(), path.string(), report["minor_mode_fraction"].get<double>());
  return kExitOk;
}

int cmd_train(const Invocation& inv, Context& ctx, Phase phase) {
  const ExperimentConfig& c = ctx.config;
  const auto target = c.make_target();
  const bool fine = phase == Phase::kFinetune;
  const std::string stem = fine ? "finetune" : "pretrain";
  const TrainConfig& train = fine ? c.finetune : c.pretrain;

  FlowModel model = [&] {
    if (fine) {
      return load_model(inv, c);
    }
    Rng init(derive_seed(c.seed, Stream::kModelInit));
    return FlowModel::initialized(c.model, init);
  }();
  const Dataset data = fine ? Dataset{} : load_data(c);

  Writer metrics(ctx.file(stem + "_metrics.jsonl"));
  const MetricsCallback on_metrics = [&](const MetricsRecord& r) {
    metrics.line("{}", to_json_line(r));
    fmt::print(ctx.log, "{} iter {}: minor {:.4f} mean_UB {:.4g} K {:.6g} ess {:.1f}\n", stem, r.iter,
               r.minor_mode_fraction, r.mean_UB, r.K_estimate, r.ess);
  };
  try {
    const TrainResult result = fine ? finetune(std::move(model), *target, train, on_metrics)
                                    : pretrain(std::move(model), data.x, *target, train, on_metrics);
    for (const std::string& w : result.warnings) {
      fmt::print(ctx.err, "warning: {}\n", w);
    }
    save_checkpoint(result.model, ctx.file(stem + ".ckpt"));
    write_trace(ctx.file(stem + "_trace.csv"), result.trace, fine);
  } catch (const TrainingAborted& e) {
    const fs::path saved = ctx.file(stem + "_aborted.ckpt");
    save_checkpoint(e.last_good(), saved);
    fmt::print(ctx.err, "error: {} (iteration {}); last good parameters saved to {}\n", e.what(), e.iter(),
               saved.string());
    return kExitNumerical;
  }
  fmt::print(ctx.log, "{}: checkpoint written to {}\n", stem, ctx.file(stem + ".ckpt").string());
  return kExitOk;
}

void write_histogram_csv(const fs::path& path, const Histogram& model, const Histogram* data) {
  Writer w(path);
  if (data != nullptr) {
    w.line("bin_lo,bin_hi,model_density,data_density");
  } else {
    w.line("bin_lo,bin_hi,model_density");
  }
  const double width = model.bin_width();
  for (std::size_t k = 0; k < model.density.size(); ++k) {
    const double lo = model.lo + width * static_cast<double>(k);
    const double hi = model.lo + width * static_cast<double>(k + 1);
    if (data != nullptr) {
      w.line("{},{},{},{}", lo, hi, model.density[k], data->density[k]);
    } else {
      w.line("{},{},{}", lo, hi, model.density[k]);
    }
  }
}

int cmd_eval(const Invocation& inv, Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const auto target = c.make_target();
  const FlowModel model = load_model(inv, c);
  const ModeSplit split = split_for(*target, c.finetune);
  const Rng root(derive_seed(c.seed, Stream::kEval));
  Rng eval_rng = root.substream(0);
  Rng hist_rng = root.substream(1);
  const MetricsRecord record = evaluate(model, *target, c.eval.samples, split, eval_rng);
  const Batch batch = generate_batch(model, *target, hist_rng, c.eval.samples);
  const VectorXd model_x1 = batch.x.col(0);
  const VectorXd model_u = -batch.log_ptB;

  std::optional<Dataset> data;
  if (fs::exists(c.dataset_path())) {
    data = load_data(c);
  }
  const VectorXd data_x1 = data ? VectorXd(data->x.col(0)) : VectorXd();
  const VectorXd data_u = data ? target->energy(data->x) : VectorXd();

  json report;
  report["checkpoint"] = inv.checkpoint->string();
  report["samples"] = c.eval.samples;
  report["mode_threshold"] = split.threshold;
  report["metrics"] = json::parse(to_json_line(record));

  const auto emit = [&](std::string_view name, const VectorXd& m, const VectorXd& d) {
    const auto [lo, hi] = histogram_range(m, data ? &d : nullptr);
    const Histogram hm = make_histogram(m, lo, hi, c.eval.bins);
    json entry;
    entry["lo"] = lo;
    entry["hi"] = hi;
    entry["model_in_range"] = hm.in_range;
    if (data) {
      const Histogram hd = make_histogram(d, lo, hi, c.eval.bins);
      write_histogram_csv(ctx.file(fmt::format("hist_{}.csv", name)), hm, &hd);
      entry["data_in_range"] = hd.in_range;
      entry["overlap"] = overlap_coefficient(hm, hd);
    } else {
      write_histogram_csv(ctx.file(fmt::format("hist_{}.csv", name)), hm, nullptr);
    }
    report["histograms"][std::string(name)] = entry;
  };
  emit("x1", model_x1, data_x1);
  emit("UB", model_u, data_u);
  report["dataset"] = data ? json(c.dataset_path().string()) : json(nullptr);
  Writer(ctx.file("eval_report.json")).stream() << report.dump(2) << '\n';
  fmt::print(ctx.log, "eval: minor {:.4f} mean_UB {:.6g} K {:.6g} ess {:.1f} logZ {:.6g}\n", record.minor_mode_fraction,
             record.mean_UB, record.K_estimate, record.ess, record.logZ_hat);
  return kExitOk;
}

pitfalls::GridDensity demo_grid(int points) {
  pitfalls::GridDensity d;
  d.grid = VectorXd::LinSpaced(points, -4.0, 4.0);
  const double dx = d.grid(1) - d.grid(0);
  d.p = (-0.5 * (d.grid.array() - 1.0).square()).exp();
  d.p /= d.p.sum() * dx;
  d.q = (-0.125 * d.grid.array().square()).exp();
  d.q /= d.q.sum() * dx;
  return d;
}

int demo_flow_ode(Context& ctx) {
  const PitfallSection& p = ctx.config.pitfall;
  const pitfalls::GridDensity d = demo_grid(p.grid_points);
  const VectorXd qt = pitfalls::unconstrained_kl_flow(d, p.horizon, p.dt);
  const VectorXd closed = pitfalls::unconstrained_kl_flow_closed_form(d, p.horizon);
  Writer w(ctx.file("pitfall_flow_ode.csv"));
  w.line("x,q0,qT,closed_form,rel_err");
  double worst = 0.0;
  for (Index i = 0; i < d.grid.size(); ++i) {
    const double rel = std::abs(qt(i) - closed(i)) / closed(i);
    worst = std::max(worst, rel);
    w.line("{},{},{},{},{}", d.grid(i), d.q(i), qt(i), closed(i), rel);
  }
  const double dx = d.grid(1) - d.grid(0);
  fmt::print(ctx.log, "flow-ode: mass {:.6g} -> {:.6g} at T={}, max rel err {:.3g}\n", d.q.sum() * dx,
             qt.sum() * dx, p.horizon, worst);
  return kExitOk;
}

int demo_naive_kl(Context& ctx) {
  const PitfallSection& p = ctx.config.pitfall;
  FlowConfig cfg;
  cfg.dim = 2;
  cfg.blocks = 2;
  cfg.hidden = 8;
  Rng rng(derive_seed(ctx.config.seed, Stream::kPitfall));
  const FlowModel model = FlowModel::initialized(cfg, rng);
  const MatrixXd batch = rng.normal_matrix(p.naive_batch, 2, 1.5);
  // The target is the starting model itself, so the run starts at the optimum.
  const VectorXd log_pB = model.log_prob(batch);
  const pitfalls::NaiveKlTrace trace = pitfalls::naive_kl_demo(model, batch, log_pB, p.naive_steps,
                                                               p.naive_learning_rate);
  Writer w(ctx.file("pitfall_naive_kl.csv"));
  w.line("step,batch_mass,naive_kl,normalized_kl");
  for (std::size_t s = 0; s < trace.batch_mass.size(); ++s) {
    w.line("{},{},{},{}", s, trace.batch_mass[s], trace.naive_kl[s], trace.normalized_kl[s]);
  }
  fmt::print(ctx.log, "naive-kl: batch mass {:.6g} -> {:.6g}, naive KL {:.6g} -> {:.6g}\n", trace.batch_mass.front(),
             trace.batch_mass.back(), trace.naive_kl.front(), trace.naive_kl.back());
  return kExitOk;
}

int demo_normalized_kl(Context& ctx) {
  const PitfallSection& p = ctx.config.pitfall;
  Rng rng(derive_seed(ctx.config.seed, Stream::kPitfall));
  Writer w(ctx.file("pitfall_normalized_kl.csv"));
  w.line("pair,size,kl,kl_proportional");
  double lowest = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < p.gibbs_pairs; ++t) {
    const Index n = 2 + static_cast<Index>(rng.below(15));
    VectorXd a(n);
    VectorXd b(n);
    for (Index i = 0; i < n; ++i) {
      a(i) = 3.0 * rng.normal();
      b(i) = 3.0 * rng.normal();
    }
    const double kl = pitfalls::normalized_minibatch_kl(a, b);
    const double same = pitfalls::normalized_minibatch_kl(a, VectorXd(a.array() + 10.0 * rng.normal()));
    lowest = std::min({lowest, kl, same});
    w.line("{},{},{},{}", t, n, kl, same);
  }
  fmt::print(ctx.log, "normalized-kl: {} pairs, smallest value {:.3g}\n", p.gibbs_pairs, lowest);
  return kExitOk;
}

int demo_stabilizer(Context& ctx) {
  const PitfallSection& p = ctx.config.pitfall;
  Rng rng(derive_seed(ctx.config.seed, Stream::kPitfall));
  VectorXd theta(p.stabilizer_states);
  VectorXd weights(p.stabilizer_states);
  for (int i = 0; i < p.stabilizer_states; ++i) {
    theta(i) = rng.normal();
    weights(i) = 0.2 + rng.uniform();
  }
  const pitfalls::SoftmaxSurrogate s(theta, weights / weights.sum());
  const VectorXd k = s.exact_k_star();
  const pitfalls::EnumerationReport r = pitfalls::enumerate_minibatches(s, p.stabilizer_batch, k);
  const VectorXd predicted = s.predicted_reduction(p.stabilizer_batch);
  Writer w(ctx.file("pitfall_stabilizer.csv"));
  w.line("coord,exact_A,k_star,naive_mean,naive_var,stabilized_mean,stabilized_var,predicted_reduction");
  for (Index j = 0; j < s.states(); ++j) {
    w.line("{},{},{},{},{},{},{},{}", j, r.exact_A(j), k(j), r.naive_mean(j), r.naive_var(j), r.stabilized_mean(j),
           r.stabilized_var(j), predicted(j));
  }
  fmt::print(ctx.log, "stabilizer: {} minibatches, total variance {:.6g} -> {:.6g}\n", r.minibatches,
             r.naive_var.sum(), r.stabilized_var.sum());
  return kExitOk;
}

int cmd_pitfall(const Invocation& inv, Context& ctx) {
  const std::string mode = inv.mode.value_or("");
  if (mode == "flow-ode") {
    return demo_flow_ode(ctx);
  }
  if (mode == "naive-kl") {
    return demo_naive_kl(ctx);
  }
  if (mode == "normalized-kl") {
    return demo_normalized_kl(ctx);
  }
  if (mode == "stabilizer") {
    return demo_stabilizer(ctx);
  }
  throw UsageError(fmt::format("unknown pitfall mode '{}' (expected flow-ode, naive-kl, normalized-kl or stabilizer)",
                               mode));
}

}  // namespace

Histogram make_histogram(const VectorXd& values, double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) {
    throw std::invalid_argument("histogram: need bins >= 1 and hi > lo");
  }
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.density.assign(static_cast<std::size_t>(bins), 0.0);
  h.total = values.size();
  const double width = h.bin_width();
  for (const double v : values) {
    if (!(v >= lo && v <= hi)) {
      continue;
    }
    const auto k = std::min(static_cast<std::size_t>((v - lo) / width), h.density.size() - 1);
    h.density[k] += 1.0;
    ++h.in_range;
  }
  if (h.in_range > 0) {
    for (double& d : h.density) {
      d /= static_cast<double>(h.in_range) * width;
    }
  }
  return h;
}

std::pair<double, double> histogram_range(const VectorXd& a, const VectorXd* b) {
  std::vector<double> pooled;
  for (const double v : a) {
    if (std::isfinite(v)) {
      pooled.push_back(v);
    }
  }
  if (b != nullptr) {
    for (const double v : *b) {
      if (std::isfinite(v)) {
        pooled.push_back(v);
      }
    }
  }
  if (pooled.empty()) {
    return {0.0, 1.0};
  }
  std::sort(pooled.begin(), pooled.end());
  const auto at = [&](double q) { return pooled[static_cast<std::size_t>(q * static_cast<double>(pooled.size() - 1))]; };
  double lo = at(0.005);
  double hi = at(0.995);
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi};
}

double overlap_coefficient(const Histogram& p, const Histogram& q) {
  if (p.density.size() != q.density.size() || p.lo != q.lo || p.hi != q.hi) {
    throw std::invalid_argument("overlap_coefficient: histograms use different bins");
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < p.density.size(); ++k) {
    sum += std::min(p.density[k], q.density[k]);
  }
  return sum * p.bin_width();
}

int capped_threads(int requested) {
  const char* env = std::getenv("BOLTZLAB_THREADS");
  if (env == nullptr || *env == '\0') {
    return requested;
  }
  char* end = nullptr;
  const long cap = std::strtol(env, &end, 10);
  if (*end != '\0' || cap < 1) {
    throw UsageError(fmt::format("BOLTZLAB_THREADS must be a positive integer, got '{}'", env));
  }
  return static_cast<int>(std::min<long>(requested, cap));
}

int run(const Invocation& inv, std::ostream& out, std::ostream& err) {
  try {
    Context ctx = prepare(inv, out, err);
    if (inv.command == "sample-data") {
      return cmd_sample_data(inv, ctx);
    }
    if (inv.command == "pretrain") {
      return cmd_train(inv, ctx, Phase::kPretrain);
    }
    if (inv.command == "finetune") {
      return cmd_train(inv, ctx, Phase::kFinetune);
    }
    if (inv.command == "eval") {
      return cmd_eval(inv, ctx);
    }
    if (inv.command == "pitfall-demo") {
      return cmd_pitfall(inv, ctx);
    }
    throw UsageError(fmt::format("unknown command '{}'", inv.command));
  } catch (const ConfigError& e) {
    fmt::print(err, "config error: {}\n", e.what());
    return kExitUsage;
  } catch (const UsageError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const CheckpointError& e) {
    fmt::print(err, "checkpoint error: {}\n", e.what());
    return kExitUsage;
  } catch (const DatasetError& e) {
    fmt::print(err, "dataset error: {}\n", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const std::domain_error& e) {
    fmt::print(err, "numerical error: {}\n", e.what());
    return kExitNumerical;
  }
}

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Normalizing-flow Boltzmann generators: data, training, evaluation and pitfall demos."};
  app.name("boltzlab");
  app.require_subcommand(1, 1);

  Invocation inv;
  std::string config;
  std::string checkpoint;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string mode;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "experiment config file (defaults apply when omitted)");
    sub->add_option("--out", out_dir, "output directory, overrides experiment.output_dir");
    sub->add_option("--seed", seed, "root seed, overrides experiment.seed");
  };
  CLI::App* sample = app.add_subcommand("sample-data", "generate a reference dataset with parallel tempering");
  common(sample);
  CLI::App* pre = app.add_subcommand("pretrain", "fit the flow to the dataset by maximum likelihood");
  common(pre);
  CLI::App* fine = app.add_subcommand("finetune", "train from a checkpoint without data");
  common(fine);
  fine->add_option("--checkpoint", checkpoint, "checkpoint to start from")->required();
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint and write histograms");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  CLI::App* demo = app.add_subcommand("pitfall-demo", "write the trace tables of one optimization pitfall");
  common(demo);
  demo->add_option("--mode", mode, "flow-ode, naive-kl, normalized-kl or stabilizer")
      ->required()
      ->check(CLI::IsMember({"flow-ode", "naive-kl", "normalized-kl", "stabilizer"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  inv.command = chosen->get_name();
  if (chosen->count("--config") > 0) {
    inv.config = config;
  }
  if (chosen->count("--out") > 0) {
    inv.out = out_dir;
  }
  if (chosen->count("--seed") > 0) {
    inv.seed = seed;
  }
  if (!checkpoint.empty()) {
    inv.checkpoint = checkpoint;
  }
  if (!mode.empty()) {
    inv.mode = mode;
  }
  return run(inv, out, err);
}

}  // namespace boltzlab::cli
