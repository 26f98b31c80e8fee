#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace rvp {

// splitmix64 step; used both as the generator core and to hash seed material.
inline uint64_t splitmix64(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based deterministic RNG. Every random decision in the pipeline
// draws from an Rng derived from the root seed plus a purpose tag and
// integer qualifiers, so runs are reproducible and independent streams
// never alias (e.g. the epoch-3 shuffle vs the clip-3 mask).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x6a09e667f3bcc908ull) {
    // Warm up so small seeds decorrelate immediately.
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return float(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t next_below(uint64_t n) {
    // Rejection to avoid modulo bias.
    uint64_t lim = ~0ull - (~0ull % n);
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= lim);
    return v % n;
  }

  // Standard normal via Box-Muller. Caches the second draw.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), order not specified. Partial Fisher-Yates.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + int(next_below(uint64_t(n - i)));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derives a child seed from a root seed, a purpose tag, and up to three
// integer qualifiers. FNV-1a over the tag, then splitmix64 mixing.
inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t a = 0,
                            uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : tag) {
    h ^= uint8_t(ch);
    h *= 0x100000001b3ull;
  }
  uint64_t s = root;
  splitmix64(s);
  s ^= h;
  splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ull * 1;
  splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull * 2;
  splitmix64(s);
  s ^= c + 0x9e3779b97f4a7c15ull * 3;
  return splitmix64(s);
}

inline Rng derive_rng(uint64_t root, std::string_view tag, uint64_t a = 0,
                      uint64_t b = 0, uint64_t c = 0) {
  return Rng(derive_seed(root, tag, a, b, c));
}

}  // namespace rvp
