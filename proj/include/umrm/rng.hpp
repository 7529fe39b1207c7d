#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "umrm/common.hpp"

namespace umrm {

// All randomness in the artifact flows from one root seed through named
// sub-streams: substream(root, "sft"), substream(root, "bon", prompt_idx), ...
// Adding a stage never perturbs another stage's stream.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t substream(uint64_t root, std::string_view name) {
  return splitmix64(root ^ fnv1a64(name));
}

inline uint64_t substream(uint64_t root, std::string_view name, uint64_t index) {
  return splitmix64(substream(root, name) ^ splitmix64(index));
}

inline uint64_t substream(uint64_t root, std::string_view name, uint64_t i, uint64_t j) {
  return splitmix64(substream(root, name, i) ^ splitmix64(~j));
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// draws do not depend on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int64_t randint(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

  // Box-Muller; second draw discarded to keep the stream position simple.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  // Sample an index from an (unnormalized, non-negative) weight vector.
  size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace umrm
