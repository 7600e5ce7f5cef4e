#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace boltzlab::cli {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumerical = 2 };

/// One parsed command line.
struct Invocation {
  /// sample-data, pretrain, finetune, eval or pitfall-demo.
  std::string command;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
};

/// Runs one command. Progress goes to `out`, diagnostics to `err`.
int run(const Invocation& invocation, std::ostream& out, std::ostream& err);

/// Parses argv and runs the command.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Density histogram on [lo, hi) with equal-width bins; the last bin also takes hi.
/// Only in-range values are counted and the density integrates to one over them.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> density;
  Eigen::Index in_range = 0;
  Eigen::Index total = 0;

  double bin_width() const { return (hi - lo) / static_cast<double>(density.size()); }
};

Histogram make_histogram(const Eigen::VectorXd& values, double lo, double hi, int bins);

/// Central 99% of the pooled finite values, widened when degenerate.
std::pair<double, double> histogram_range(const Eigen::VectorXd& a, const Eigen::VectorXd* b);

/// sum_k min(p_k, q_k) * width for two histograms on the same bins.
double overlap_coefficient(const Histogram& p, const Histogram& q);

/// Caps `requested` by BOLTZLAB_THREADS when it is set. Throws on a malformed value.
int capped_threads(int requested);

}  // namespace boltzlab::cli
