#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "boltzlab/flow.hpp"

namespace boltzlab {

namespace {

constexpr std::string_view kMagic = "boltzlab-flow-checkpoint";

double parse_double(const std::string& token, const std::string& what) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0' || errno == ERANGE) {
    throw CheckpointError(fmt::format("checkpoint: bad value '{}' for {}", token, what));
  }
  return v;
}

long parse_int(const std::string& token, const std::string& what) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(token.c_str(), &end, 10);
  if (end == token.c_str() || *end != '\0' || errno == ERANGE) {
    throw CheckpointError(fmt::format("checkpoint: bad integer '{}' for {}", token, what));
  }
  return v;
}

}  // namespace

std::string checkpoint_to_string(const FlowModel& model) {
  const FlowConfig& c = model.config();
  std::string out;
  out += fmt::format("{}\n", kMagic);
  out += fmt::format("format_version {}\n", kCheckpointFormatVersion);
  out += fmt::format("dim {}\n", c.dim);
  out += fmt::format("block_count {}\n", c.blocks);
  out += fmt::format("hidden_width {}\n", c.hidden);
  out += fmt::format("sigma {:a}\n", c.sigma);
  out += fmt::format("celu_alpha {:a}\n", c.celu_alpha);
  out += fmt::format("scale_clamp {:a}\n", c.scale_clamp);
  const Eigen::VectorXd params = model.parameters();
  out += fmt::format("parameter_count {}\n", params.size());
  for (Index i = 0; i < params.size(); ++i) {
    out += fmt::format("{:a}\n", params(i));
  }
  out += "end\n";
  return out;
}

FlowModel checkpoint_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointError("checkpoint: missing header line, not a boltzlab flow checkpoint");
  }
  std::map<std::string, std::string> header;
  static const std::vector<std::string> kKeys = {"format_version", "dim",         "block_count", "hidden_width",
                                                 "sigma",          "celu_alpha",  "scale_clamp", "parameter_count"};
  for (const std::string& key : kKeys) {
    if (!std::getline(in, line)) {
      throw CheckpointError(fmt::format("checkpoint: truncated header, expected '{}'", key));
    }
    std::istringstream fields(line);
    std::string name;
    std::string value;
    fields >> name >> value;
    if (name != key || value.empty()) {
      throw CheckpointError(fmt::format("checkpoint: expected '{}' in header, found '{}'", key, line));
    }
    header[name] = value;
  }
  const long version = parse_int(header["format_version"], "format_version");
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError(fmt::format("checkpoint: format_version {} is not supported (this build reads {})",
                                      version, kCheckpointFormatVersion));
  }
  FlowConfig config;
  config.dim = static_cast<int>(parse_int(header["dim"], "dim"));
  config.blocks = static_cast<int>(parse_int(header["block_count"], "block_count"));
  config.hidden = static_cast<int>(parse_int(header["hidden_width"], "hidden_width"));
  config.sigma = parse_double(header["sigma"], "sigma");
  config.celu_alpha = parse_double(header["celu_alpha"], "celu_alpha");
  config.scale_clamp = parse_double(header["scale_clamp"], "scale_clamp");
  FlowModel model = [&] {
    try {
      return FlowModel(config);
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(fmt::format("checkpoint: invalid architecture ({})", e.what()));
    }
  }();
  const long count = parse_int(header["parameter_count"], "parameter_count");
  if (count != model.parameter_count()) {
    throw CheckpointError(fmt::format("checkpoint: parameter_count {} does not match architecture ({})", count,
                                      model.parameter_count()));
  }
  Eigen::VectorXd params(count);
  for (long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) {
      throw CheckpointError(fmt::format("checkpoint: truncated after {} of {} parameters", i, count));
    }
    params(i) = parse_double(line, fmt::format("parameter {}", i));
  }
  if (!std::getline(in, line) || line != "end") {
    throw CheckpointError("checkpoint: missing 'end' trailer");
  }
  model.set_parameters(params);
  return model;
}

void save_checkpoint(const FlowModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(fmt::format("checkpoint: cannot open '{}' for writing", path.string()));
  }
  out << checkpoint_to_string(model);
  if (!out) {
    throw CheckpointError(fmt::format("checkpoint: write to '{}' failed", path.string()));
  }
}

FlowModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(fmt::format("checkpoint: cannot open '{}'", path.string()));
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return checkpoint_from_string(buffer.str());
}

}  // namespace boltzlab
