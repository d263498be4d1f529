#pragma once

#include <cstdint>
#include <string_view>

namespace flashclear {

// Portable pseudo random stream (xoshiro256** seeded through splitmix64).
// Unlike the <random> distributions, the sequence of doubles produced here is
// identical on every conforming platform, which keeps corpora and training
// runs reproducible across machines.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derive an independent seed for a named subsystem from a root seed.
std::uint64_t split_seed(std::uint64_t root, std::string_view label,
                         std::uint64_t index = 0);

}  // namespace flashclear
