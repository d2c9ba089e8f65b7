#pragma once

#include <cstdint>
#include <random>

namespace avglm {

// Deterministic random stream. The uniform draw is built by hand from the
// raw 64-bit output so that the same seed yields the same values on every
// platform (std::uniform_real_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return n == 0 ? 0 : engine_() % n;
  }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a over a byte string; used to fingerprint vocabulary files.
inline std::uint64_t fnv1a(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace avglm
