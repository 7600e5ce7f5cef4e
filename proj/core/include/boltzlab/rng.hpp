#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Core>

namespace boltzlab {

/// xoshiro256++ generator (Blackman & Vigna), seeded through splitmix64.
///
/// Every random draw in the library goes through this type so that a seed
/// fully determines a run on any platform. The normal deviates use the
/// Marsaglia polar method implemented here rather than
/// std::normal_distribution, whose algorithm is implementation-defined.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal deviate.
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  /// Matrix of i.i.d. N(0, sigma^2) entries, filled row by row.
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, double sigma = 1.0);

  /// Advances the state by 2^128 draws; used to derive independent streams.
  void jump();
  /// Returns a copy positioned `index + 1` jumps ahead of this stream.
  Rng substream(unsigned index) const;

 private:
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

/// splitmix64 step, exposed for hashing seeds and configs.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace boltzlab
