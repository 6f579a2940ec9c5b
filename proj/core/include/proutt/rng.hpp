#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace proutt {

/// Seeded generator with a platform-independent bounded draw.
///
/// std::uniform_int_distribution is implementation-defined, so outputs would
/// differ between standard libraries; the draw here uses rejection sampling on
/// the raw mt19937_64 stream, whose sequence is fixed by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Uniform double in [0, 1).
  double uniform01();

  bool coin() { return uniform_index(2) == 1; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// FNV-1a, used to fold identifiers into seeds.
std::uint64_t fnv1a(std::string_view s);

/// Seed for a sub-task, independent of worker scheduling.
std::uint64_t derive_seed(std::uint64_t base, std::string_view key, std::uint64_t index);

}  // namespace proutt
