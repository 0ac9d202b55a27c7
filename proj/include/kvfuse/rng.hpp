#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace kvfuse {

// SplitMix64 step; used for seeding and for seed derivation.
uint64_t splitmix64(uint64_t& state);

// Derives an independent seed for a named subsystem from a root seed:
// splitmix64(root ^ fnv1a64(label)).
uint64_t derive_seed(uint64_t root, std::string_view label);

// xoshiro256** generator seeded from a 64-bit value through SplitMix64.
// Every random draw in the project goes through this class so results are
// reproducible bit-for-bit across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  uint64_t next_u64();
  // Uniform double in [0, 1) built from the top 53 bits.
  double uniform();
  // Uniform integer in [0, bound). Uses rejection to avoid modulo bias.
  uint64_t below(uint64_t bound);
  // Standard normal via Box-Muller (both outputs consumed in order).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<int> permutation(int n);

 private:
  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace kvfuse
