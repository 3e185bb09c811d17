#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "cbff/common.hpp"

namespace cbff {

// Deterministic random stream keyed by (seed, stream name). Streams with
// different keys are statistically independent; the same key always yields
// the same sequence, on every platform. Distributions are hand-rolled so the
// sequences do not depend on the standard library implementation.
//
// Engine: xoshiro256++ seeded through splitmix64.
class RngStream {
 public:
  RngStream() : RngStream(0, "") {}

  RngStream(uint64_t seed, std::string_view stream) {
    uint64_t key = fnv1a64(stream.data(), stream.size());
    uint64_t x = seed ^ (key * 0x9e3779b97f4a7c15ull);
    for (auto& s : state_) s = splitmix64(x);
    // All-zero state is invalid for xoshiro; splitmix64 never yields four zeros
    // for distinct counters, but guard anyway.
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  // Convenience: key a child stream off extra integer components,
  // e.g. per-sample or per-epoch streams.
  static RngStream keyed(uint64_t seed, std::string_view stream, uint64_t a, uint64_t b = 0) {
    std::string full(stream);
    full += '/';
    full += std::to_string(a);
    full += '/';
    full += std::to_string(b);
    return RngStream(seed, full);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Lemire's multiply-shift; n must be > 0.
  uint64_t uniform_int(uint64_t n) {
    check(n > 0, "uniform_int: n must be positive");
    return uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (the spare value is cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    if (u1 <= 0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = static_cast<decltype(n)>(uniform_int(uint64_t(i) + 1));
      std::swap(first[i], first[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline RngStream seeded_rng(uint64_t seed, std::string_view stream) {
  return RngStream(seed, stream);
}

}  // namespace cbff
