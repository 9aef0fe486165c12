#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sfh {

/// Deterministic random source. mt19937_64 is fully specified by the standard,
/// and all distributions here are hand-derived from its raw output, so streams
/// are reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1), never exactly 0 or 1.
  double uniform_open() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    // modulo bias is < 2^-40 for any n that fits in memory here
    return static_cast<std::size_t>(gen_() % n);
  }

  /// Standard normal via Box-Muller (two uniforms per call, no cached spare).
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Laplace(0, scale) by inverse CDF. scale == 0 returns exactly 0 and
  /// consumes no state.
  double laplace(double scale) {
    if (scale == 0.0) return 0.0;
    const double p = uniform_open();
    return p < 0.5 ? scale * std::log(2.0 * p) : -scale * std::log(2.0 * (1.0 - p));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// splitmix64 finalizer; derives independent sub-seeds from a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sfh
