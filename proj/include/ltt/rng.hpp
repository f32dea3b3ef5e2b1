// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>

namespace ltt {

std::uint64_t splitmix64(std::uint64_t x);
/// Order-sensitive combination of seed components into one 64-bit seed.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

/// mt19937_64 with distribution code written out here: the standard
/// distributions are implementation-defined, and seeds must reproduce
/// bit-identical streams. State round-trips through a string.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ltt
