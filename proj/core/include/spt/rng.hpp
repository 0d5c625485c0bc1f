#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace spt {

// xoshiro256** seeded through splitmix64. Self-contained so that every stream
// (data synthesis, init, shuffling, point sampling) is reproducible bit-for-bit
// independent of the standard library in use.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi);

  // Inclusive bounds. Requires lo <= hi.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Standard normal via Box-Muller; one spare value is cached.
  double normal();
  double normal(double mean, double stddev);

  // Derived stream: deterministic function of the parent seed and the key.
  Rng fork(uint64_t key) const;

  // Fisher-Yates over indices [0, n).
  std::vector<int64_t> permutation(int64_t n);

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
  uint64_t seed_;
};

// Order-sensitive mixing of several 64-bit keys into one seed.
uint64_t mix_seed(std::initializer_list<uint64_t> keys);

}  // namespace spt
