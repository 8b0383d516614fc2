#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace hnas {

/// Seeded 64-bit Mersenne Twister stream. Streams are derived from a root
/// seed and a name so that independent consumers (initialization, data order,
/// channel masks) never share state.
///
/// Conversions to uniform/normal variates are done here rather than through
/// <random> distributions, whose output is implementation-defined.
class Rng {
 public:
  Rng() : Rng(0, "default") {}
  Rng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next() { return engine_(); }
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (one variate per call).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::string state() const;
  void set_state(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// FNV-1a over raw bytes; used for stream derivation and provenance hashes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace hnas
