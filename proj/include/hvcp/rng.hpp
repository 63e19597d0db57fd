#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "hvcp/core.hpp"

namespace hvcp {

// splitmix64 finalizer; used to derive independent child streams from
// (seed, tag, index) tuples so results never depend on draw interleaving.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

// Deterministic generator with explicitly pinned output mapping: identical
// seeds give identical streams on every platform we build for.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0,n).
  std::uint64_t below(std::uint64_t n) {
    check(n > 0, "rng: below(0)");
    std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = gen_();
    while (x >= lim) x = gen_();
    return x % n;
  }

  // Standard normal via Box-Muller, one cached mate per pair.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(th);
    has_cached_ = true;
    return r * std::cos(th);
  }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal();
    return out;
  }

  // First k entries of a Fisher-Yates shuffle of [0,n).
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
    check(k <= n, "rng: sample_indices k > n");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  Rng child(std::uint64_t tag) { return Rng(mix64(gen_(), tag)); }

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace hvcp
