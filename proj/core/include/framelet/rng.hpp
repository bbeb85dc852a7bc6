#pragma once

#include <cstdint>

namespace framelet {

// Seed for every randomized constructor in the library. Same seed, same stream,
// on any platform.
struct Seed {
  std::uint64_t value = 0;
};

// Stable child-seed derivation: all randomness flows from one master seed and
// per-component indices. One splitmix64 round over (master, index).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// xoshiro256++ generator seeded through splitmix64.
class Rng {
 public:
  explicit Rng(Seed seed);
  explicit Rng(std::uint64_t seed) : Rng(Seed{seed}) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller (pair cached).
  double normal();

  // Uniform integer in [0, n), bias-free.
  std::uint64_t below(std::uint64_t n);

  // Independent stream derived from this generator's construction seed; does
  // not depend on how many draws were made.
  Rng child(std::uint64_t index) const;

 private:
  std::uint64_t s_[4];
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace framelet
