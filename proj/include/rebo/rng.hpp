// Counter-based deterministic RNG. Every consumer derives its own stream
// from (seed, purpose tag, indices), so adding or removing a consumer
// never shifts the draws seen by another. This is what makes per-sample
// regeneration and the baseline-equivalence checks bit-exact.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace rebo {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(splitmix64(seed)) {}

  // New independent stream keyed by a tag plus integer indices.
  Rng derive(std::string_view tag) const {
    return Rng::from_key(hash_combine(key_, hash_str(tag)));
  }
  Rng derive(std::string_view tag, std::uint64_t a) const {
    return Rng::from_key(hash_combine(hash_combine(key_, hash_str(tag)), a));
  }
  Rng derive(std::string_view tag, std::uint64_t a, std::uint64_t b) const {
    return Rng::from_key(
        hash_combine(hash_combine(hash_combine(key_, hash_str(tag)), a), b));
  }
  Rng derive(std::string_view tag, std::uint64_t a, std::uint64_t b,
             std::uint64_t c) const {
    return Rng::from_key(hash_combine(
        hash_combine(hash_combine(hash_combine(key_, hash_str(tag)), a), b),
        c));
  }

  std::uint64_t next_u64() { return splitmix64(key_ + ++counter_); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two uniforms per call, no cached spare.
  double normal(double mean = 0.0, double sigma = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sigma * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) %
           (n == 0 ? 1 : n);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static Rng from_key(std::uint64_t key) {
    Rng r;
    r.key_ = key;
    return r;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace rebo
