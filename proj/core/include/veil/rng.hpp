#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace veil {

/// Deterministic random source. Every stochastic operation in the library
/// takes one of these explicitly; equal seeds give bit-equal results.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal draw (Box-Muller, so the stream is portable).
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  /// Independent child stream; does not advance this generator.
  SeededRng fork(std::uint64_t stream) const;

  /// Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace veil
