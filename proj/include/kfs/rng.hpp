#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace kfs {

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based generator: the value at index i depends only on
// (seed, stream, i), never on how many values were drawn before it.
// This is what makes weight initialization and cached embedding means
// reproducible from a seed alone.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view stream)
      : key_(mix64(seed ^ fnv1a64(stream))) {}

  std::uint64_t bits(std::uint64_t i) const {
    return mix64(key_ + i * 0x9e3779b97f4a7c15ull);
  }

  // uniform in (0, 1), never exactly 0
  double uniform(std::uint64_t i) const {
    double u = static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
  }

  // standard normal via Box-Muller; index i consumes counters 2i and 2i+1
  double gaussian(std::uint64_t i) const {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double u1 = uniform(2 * i);
    double u2 = uniform(2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // uniform integer in [0, n); modulo bias is negligible for the index
  // ranges used here
  std::uint64_t index(std::uint64_t i, std::uint64_t n) const {
    return bits(i) % n;
  }

 private:
  std::uint64_t key_;
};

}  // namespace kfs
