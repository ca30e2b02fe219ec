// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace surgvid {

// Deterministic random source. Wraps std::mt19937_64 (whose output sequence is
// fully specified by the standard) but implements its own value mappings, since
// std::*_distribution results are implementation-defined. Every draw is a pure
// function of the seed, so runs replay bit-identically.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(mix(seed)), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the sizes used here.
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (one value per call; the pair's second half
  // is discarded to keep the draw count predictable).
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Derives an independent child stream from the construction seed and a label.
  // Draw history of the parent does not affect the child.
  Rng split(std::string_view label) const {
    uint64_t h = mix(seed_);
    for (char c : label) h = mix(h ^ static_cast<uint64_t>(static_cast<unsigned char>(c)));
    return Rng(h);
  }

  Rng split(uint64_t salt) const { return Rng(mix(seed_) ^ mix(salt)); }

  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
};

}  // namespace surgvid
