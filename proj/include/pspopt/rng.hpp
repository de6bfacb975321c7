#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pspopt/common.hpp"

namespace psp {

// Self-contained counter-free generator (splitmix64 core). We avoid the
// standard-library distributions because their output sequences are
// implementation-defined, and the whole pipeline promises bit-exact
// reproducibility under a fixed master seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1), never exactly 0 (safe for logs and Box-Muller).
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal();
    return v;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps this exactly uniform.
    const std::uint64_t lim = n * ((~0ULL) / n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Seed for a named sub-component: fixed labeled hashing so every command
/// stage draws from its own reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& label) {
  Rng mix(master ^ fnv1a64(label));
  return mix.next_u64();
}

inline std::uint64_t derive_seed(std::uint64_t master, const std::string& label, std::uint64_t index) {
  Rng mix(master ^ fnv1a64(label) ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
  return mix.next_u64();
}

}  // namespace psp
