#include "boltzlab/cli/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "boltzlab/dataset.hpp"
#include "boltzlab/rng.hpp"

namespace boltzlab::cli {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_double(std::string_view v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size() || std::isnan(out)) {
    throw std::invalid_argument(fmt::format("'{}' is not a number", v));
  }
  return out;
}

template <class Int>
Int parse_integer(std::string_view v) {
  Int out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) {
    throw std::invalid_argument(fmt::format("'{}' is not an integer", v));
  }
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true") {
    return true;
  }
  if (v == "false") {
    return false;
  }
  throw std::invalid_argument(fmt::format("'{}' is not a boolean (true or false)", v));
}

std::vector<double> parse_list(std::string_view v) {
  std::vector<double> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_double(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) {
      break;
    }
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string format_double(double v) { return fmt::format("{}", v); }

std::string format_list(const std::vector<double>& v) { return fmt::format("{}", fmt::join(v, ",")); }

struct Field {
  std::string section;
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Field real(std::string section, std::string key, std::string help, Access access) {
  return {std::move(section), std::move(key), std::move(help),
          [access](ExperimentConfig& c, std::string_view v) { access(c) = parse_double(v); },
          [access](const ExperimentConfig& c) { return format_double(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field integer(std::string section, std::string key, std::string help, Access access) {
  return {std::move(section), std::move(key), std::move(help),
          [access](ExperimentConfig& c, std::string_view v) {
            auto& ref = access(c);
            ref = parse_integer<std::remove_reference_t<decltype(ref)>>(v);
          },
          [access](const ExperimentConfig& c) { return fmt::format("{}", access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field boolean(std::string section, std::string key, std::string help, Access access) {
  return {std::move(section), std::move(key), std::move(help),
          [access](ExperimentConfig& c, std::string_view v) { access(c) = parse_bool(v); },
          [access](const ExperimentConfig& c) {
            return std::string(access(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

template <class Access>
Field text(std::string section, std::string key, std::string help, Access access) {
  return {std::move(section), std::move(key), std::move(help),
          [access](ExperimentConfig& c, std::string_view v) { access(c) = std::string(v); },
          [access](const ExperimentConfig& c) { return access(const_cast<ExperimentConfig&>(c)); }};
}

/// The keys shared by [pretrain] and [finetune].
void add_train_fields(std::vector<Field>& f, const std::string& s, TrainConfig ExperimentConfig::*member) {
  const auto t = [member](ExperimentConfig& c) -> TrainConfig& { return c.*member; };
  f.push_back(integer(s, "batch_size", "minibatch size", [t](ExperimentConfig& c) -> Index& { return t(c).batch_size; }));
  f.push_back({s, "optimizer", "adam or sgd",
               [t](ExperimentConfig& c, std::string_view v) { t(c).optimizer.kind = parse_optimizer_kind(v); },
               [t](const ExperimentConfig& c) {
                 return std::string(optimizer_name(t(const_cast<ExperimentConfig&>(c)).optimizer.kind));
               }});
  f.push_back(real(s, "learning_rate", "optimizer step size",
                   [t](ExperimentConfig& c) -> double& { return t(c).optimizer.learning_rate; }));
  f.push_back(real(s, "beta1", "adam first-moment decay", [t](ExperimentConfig& c) -> double& { return t(c).optimizer.beta1; }));
  f.push_back(real(s, "beta2", "adam second-moment decay", [t](ExperimentConfig& c) -> double& { return t(c).optimizer.beta2; }));
  f.push_back(real(s, "epsilon", "adam denominator offset", [t](ExperimentConfig& c) -> double& { return t(c).optimizer.epsilon; }));
  f.push_back(integer(s, "eval_every", "iterations between evaluations", [t](ExperimentConfig& c) -> Index& { return t(c).eval_every; }));
  f.push_back(integer(s, "eval_samples", "samples per evaluation (>= 1000)",
                      [t](ExperimentConfig& c) -> Index& { return t(c).eval_samples; }));
  f.push_back(real(s, "fraction", "fraction of iters actually run; 0.1 is a partial run",
                   [t](ExperimentConfig& c) -> double& { return t(c).fraction; }));
  f.push_back({s, "mode_threshold", "x1 cutoff of the minor mode, or auto for the saddle point",
               [t](ExperimentConfig& c, std::string_view v) {
                 t(c).mode_threshold = v == "auto" ? std::nullopt : std::optional<double>(parse_double(v));
               },
               [t](const ExperimentConfig& c) {
                 const auto& m = t(const_cast<ExperimentConfig&>(c)).mode_threshold;
                 return m ? format_double(*m) : std::string("auto");
               }});
}

std::vector<Field> make_schema() {
  using C = ExperimentConfig;
  std::vector<Field> f;
  f.push_back(integer("experiment", "seed", "root seed; every random stream derives from it",
                      [](C& c) -> std::uint64_t& { return c.seed; }));
  f.push_back(text("experiment", "output_dir", "directory for every artifact", [](C& c) -> std::string& { return c.output_dir; }));
  f.push_back(text("experiment", "dataset", "dataset path; empty means <output_dir>/dataset.bin",
                   [](C& c) -> std::string& { return c.dataset; }));

  f.push_back(text("target", "kind", "double_well or gaussian", [](C& c) -> std::string& { return c.target.kind; }));
  f.push_back(integer("target", "dim", "dimension", [](C& c) -> int& { return c.target.double_well.dim; }));
  f.push_back(real("target", "a", "quartic coefficient", [](C& c) -> double& { return c.target.double_well.a; }));
  f.push_back(real("target", "b", "quadratic coefficient", [](C& c) -> double& { return c.target.double_well.b; }));
  f.push_back(real("target", "c", "linear tilt", [](C& c) -> double& { return c.target.double_well.c; }));
  f.push_back(real("target", "sigma_wide", "standard deviation of the Gaussian dimensions",
                   [](C& c) -> double& { return c.target.double_well.sigma_wide; }));
  f.push_back(real("target", "cap_threshold", "per-term gradient bound; inf disables capping",
                   [](C& c) -> double& { return c.target.double_well.cap_threshold; }));
  f.push_back(real("target", "gaussian_sigma", "standard deviation of the gaussian target",
                   [](C& c) -> double& { return c.target.gaussian_sigma; }));

  f.push_back(integer("model", "blocks", "coupling blocks", [](C& c) -> int& { return c.model.blocks; }));
  f.push_back(integer("model", "hidden", "hidden width of the coupling networks", [](C& c) -> int& { return c.model.hidden; }));
  f.push_back(real("model", "sigma", "base distribution standard deviation", [](C& c) -> double& { return c.model.sigma; }));
  f.push_back(real("model", "celu_alpha", "CELU alpha", [](C& c) -> double& { return c.model.celu_alpha; }));
  f.push_back(real("model", "scale_clamp", "bound on each log-scale output", [](C& c) -> double& { return c.model.scale_clamp; }));

  f.push_back(integer("sampler", "ladder_size", "number of temperatures", [](C& c) -> int& { return c.sampler.ladder_size; }));
  f.push_back(real("sampler", "t_max", "highest temperature of the geometric ladder", [](C& c) -> double& { return c.sampler.t_max; }));
  f.push_back({"sampler", "proposal_std", "one value per temperature; empty means 0.5 sqrt(T)",
               [](C& c, std::string_view v) { c.sampler.pt.proposal_std = parse_list(v); },
               [](const C& c) { return format_list(c.sampler.pt.proposal_std); }});
  f.push_back(integer("sampler", "steps_per_exchange", "MH steps between swap attempts",
                      [](C& c) -> int& { return c.sampler.pt.steps_per_exchange; }));
  f.push_back(integer("sampler", "total_samples", "recorded samples", [](C& c) -> Index& { return c.sampler.pt.total_samples; }));
  f.push_back(integer("sampler", "burn_in", "discarded base-chain steps", [](C& c) -> Index& { return c.sampler.pt.burn_in; }));
  f.push_back(integer("sampler", "thinning", "base-chain steps per recorded sample",
                      [](C& c) -> Index& { return c.sampler.pt.thinning; }));
  f.push_back(boolean("sampler", "swaps", "attempt replica exchanges", [](C& c) -> bool& { return c.sampler.pt.swaps_enabled; }));
  f.push_back(integer("sampler", "threads", "chain workers, capped by BOLTZLAB_THREADS",
                      [](C& c) -> int& { return c.sampler.pt.threads; }));
  f.push_back(text("sampler", "format", "dataset encoding: binary or text", [](C& c) -> std::string& { return c.sampler.format; }));

  f.push_back({"pretrain", "iters", "iterations, or auto for finetune iters / 10",
               [](C& c, std::string_view v) {
                 c.pretrain_iters_auto = v == "auto";
                 if (!c.pretrain_iters_auto) {
                   c.pretrain.iters = parse_integer<Index>(v);
                 }
               },
               [](const C& c) { return c.pretrain_iters_auto ? std::string("auto") : fmt::format("{}", c.pretrain.iters); }});
  add_train_fields(f, "pretrain", &C::pretrain);

  f.push_back({"finetune", "loss", "klx, klz_df or l2_masked",
               [](C& c, std::string_view v) { c.finetune.loss.kind = parse_loss_kind(v); },
               [](const C& c) { return std::string(loss_name(c.finetune.loss.kind)); }});
  f.push_back(boolean("finetune", "detach_k", "l2_masked: treat K as a constant", [](C& c) -> bool& { return c.finetune.loss.detach_k; }));
  f.push_back(boolean("finetune", "apply_mask", "l2_masked: keep only r > K", [](C& c) -> bool& { return c.finetune.loss.apply_mask; }));
  f.push_back(boolean("finetune", "self_normalize", "klz_df: divide weights by their batch mean",
                      [](C& c) -> bool& { return c.finetune.loss.self_normalize; }));
  f.push_back(integer("finetune", "iters", "iterations", [](C& c) -> Index& { return c.finetune.iters; }));
  add_train_fields(f, "finetune", &C::finetune);
  f.push_back(boolean("finetune", "trick", "variance-reduced gradients with a running control variate",
                      [](C& c) -> bool& { return c.finetune.trick_enabled; }));
  f.push_back(real("finetune", "trick_decay", "decay of the control-variate running means",
                   [](C& c) -> double& { return c.finetune.trick_decay; }));

  f.push_back(integer("eval", "samples", "generated samples (>= 1000)", [](C& c) -> Index& { return c.eval.samples; }));
  f.push_back(integer("eval", "bins", "histogram bins", [](C& c) -> int& { return c.eval.bins; }));

  f.push_back(integer("pitfall", "grid_points", "flow-ode grid size", [](C& c) -> int& { return c.pitfall.grid_points; }));
  f.push_back(real("pitfall", "horizon", "flow-ode integration time", [](C& c) -> double& { return c.pitfall.horizon; }));
  f.push_back(real("pitfall", "dt", "flow-ode RK4 step", [](C& c) -> double& { return c.pitfall.dt; }));
  f.push_back(integer("pitfall", "naive_steps", "naive-kl gradient steps", [](C& c) -> int& { return c.pitfall.naive_steps; }));
  f.push_back(real("pitfall", "naive_learning_rate", "naive-kl step size",
                   [](C& c) -> double& { return c.pitfall.naive_learning_rate; }));
  f.push_back(integer("pitfall", "naive_batch", "naive-kl batch size", [](C& c) -> Index& { return c.pitfall.naive_batch; }));
  f.push_back(integer("pitfall", "gibbs_pairs", "normalized-kl random weight pairs",
                      [](C& c) -> Index& { return c.pitfall.gibbs_pairs; }));
  f.push_back(integer("pitfall", "stabilizer_states", "stabilizer surrogate states",
                      [](C& c) -> int& { return c.pitfall.stabilizer_states; }));
  f.push_back(integer("pitfall", "stabilizer_batch", "stabilizer minibatch size",
                      [](C& c) -> int& { return c.pitfall.stabilizer_batch; }));
  return f;
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = make_schema();
  return fields;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  pretrain.phase = Phase::kPretrain;
  pretrain.loss.kind = LossKind::kKlz;
  pretrain.optimizer.learning_rate = 1e-3;
  finetune.phase = Phase::kFinetune;
  finetune.loss.kind = LossKind::kL2Masked;
  finetune.optimizer.learning_rate = 1e-4;
}

std::uint64_t derive_seed(std::uint64_t seed, Stream stream) {
  std::uint64_t state = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1));
  return splitmix64(state);
}

void ExperimentConfig::resolve() {
  try {
    if (target.kind != "double_well" && target.kind != "gaussian") {
      throw std::invalid_argument(fmt::format("target: unknown kind '{}' (expected double_well or gaussian)", target.kind));
    }
    (void)make_target();
    model.dim = target.double_well.dim;
    model.validate();
    if (sampler.ladder_size < 1 || !(sampler.t_max >= 1.0)) {
      throw std::invalid_argument("sampler: need ladder_size >= 1 and t_max >= 1");
    }
    sampler.pt.temperatures = PTConfig::geometric_ladder(sampler.ladder_size, sampler.t_max);
    sampler.pt.seed = derive_seed(seed, Stream::kSampler);
    sampler.pt.validate();
    (void)parse_dataset_format(sampler.format);
    if (finetune.loss.kind == LossKind::kKlz) {
      throw std::invalid_argument("finetune: klz needs data; use the pretrain command");
    }
    if (pretrain_iters_auto) {
      pretrain.iters = finetune.iters / 10;
    }
    pretrain.seed = derive_seed(seed, Stream::kPretrain);
    finetune.seed = derive_seed(seed, Stream::kFinetune);
    pretrain.validate();
    finetune.validate();
    if (eval.samples < 1000) {
      throw std::invalid_argument("eval: samples must be at least 1000");
    }
    if (eval.bins < 1) {
      throw std::invalid_argument("eval: bins must be positive");
    }
    if (pitfall.grid_points < 2 || !(pitfall.horizon >= 0.0) || !(pitfall.dt > 0.0) || pitfall.naive_steps < 0 ||
        pitfall.naive_batch < 1 || pitfall.gibbs_pairs < 1 || pitfall.stabilizer_states < 2 ||
        pitfall.stabilizer_batch < 1) {
      throw std::invalid_argument("pitfall: a size or step setting is out of range");
    }
    if (output_dir.empty()) {
      throw std::invalid_argument("experiment: output_dir must not be empty");
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::filesystem::path ExperimentConfig::dataset_path() const {
  if (!dataset.empty()) {
    return dataset;
  }
  return std::filesystem::path(output_dir) / (sampler.format == "text" ? "dataset.txt" : "dataset.bin");
}

std::unique_ptr<EnergyModel> ExperimentConfig::make_target() const {
  if (target.kind == "gaussian") {
    return std::make_unique<GaussianEnergy>(target.double_well.dim, target.gaussian_sigma);
  }
  return std::make_unique<DoubleWell>(target.double_well);
}

std::string ExperimentConfig::to_text() const {
  std::string out = "# boltzlab resolved configuration\n";
  std::string section;
  for (const Field& f : schema()) {
    if (f.section != section) {
      section = f.section;
      out += fmt::format("\n[{}]\n", section);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(*this));
  }
  return out;
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_text()); }

std::string ExperimentConfig::data_hash() const {
  std::string out;
  for (const Field& f : schema()) {
    const bool sampler_setting = f.section == "sampler" && f.key != "threads";
    if (f.section == "target" || sampler_setting || (f.section == "experiment" && f.key == "seed")) {
      out += fmt::format("{}.{} = {}\n", f.section, f.key, f.get(*this));
    }
  }
  return fnv1a_hex(out);
}

ExperimentConfig parse_config(std::string_view text, std::string_view origin) {
  std::map<std::pair<std::string_view, std::string_view>, const Field*> index;
  std::set<std::string_view> sections;
  for (const Field& f : schema()) {
    index[{f.section, f.key}] = &f;
    sections.insert(f.section);
  }
  ExperimentConfig config;
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') {
      continue;
    }
    const auto where = [&] { return fmt::format("{}:{}", origin, line_no); };
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(fmt::format("{}: malformed section header '{}'", where(), line));
      }
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.contains(section)) {
        throw ConfigError(fmt::format("{}: unknown section [{}]", where(), section));
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(fmt::format("{}: expected 'key = value', found '{}'", where(), line));
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError(fmt::format("{}: key '{}' appears before any [section]", where(), key));
    }
    const auto it = index.find({section, key});
    if (it == index.end()) {
      throw ConfigError(fmt::format("{}: unknown key '{}' in [{}]", where(), key, section));
    }
    if (!seen.insert({section, key}).second) {
      throw ConfigError(fmt::format("{}: duplicate key '{}' in [{}]", where(), key, section));
    }
    try {
      it->second->set(config, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(fmt::format("{}: bad value for {}.{}: {}", where(), section, key, e.what()));
    }
  }
  try {
    config.resolve();
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", origin, e.what()));
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> out;
  for (const Field& f : schema()) {
    out.push_back({f.section, f.key, f.help});
  }
  return out;
}

}  // namespace boltzlab::cli
