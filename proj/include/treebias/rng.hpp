#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace treebias {

// Seeded RNG wrapper. std::mt19937_64 output is fully specified by the
// standard; the helpers below avoid std::uniform_*_distribution, whose
// algorithms are implementation-defined, so streams are identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  uint64_t next_below(uint64_t n) {
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - (std::numeric_limits<uint64_t>::max() % n);
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Sample k distinct indices from [0, n) without replacement
  // (partial Fisher-Yates over an index vector; order is the draw order).
  std::vector<size_t> sample_indices(size_t n, size_t k) {
    if (k > n) throw std::invalid_argument("cannot sample more indices than exist");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k; ++i) {
      const size_t j = i + static_cast<size_t>(next_below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace treebias
