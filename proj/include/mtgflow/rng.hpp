#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "mtgflow/tensor.hpp"

namespace mtgflow {

// Counter-based deterministic RNG (splitmix64 finalizer over seed ^ counter).
// Every consumer forks its own labelled stream from the run seed, so adding
// or removing one consumer never shifts the draws seen by another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(mix(seed ^ 0x6d7467666c6f7721ULL)) {}

  Rng fork(std::string_view label) const {
    std::uint64_t h = fnv1a(label);
    return Rng(mix(seed_ ^ h));
  }

  Rng fork(std::string_view label, std::uint64_t n) const {
    std::uint64_t h = fnv1a(label) ^ mix(n + 0x9e3779b97f4a7c15ULL);
    return Rng(mix(seed_ ^ h));
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ ^ (counter_ * 0x9e3779b97f4a7c15ULL));
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one draw consumes two counter steps.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::size_t index(std::size_t n) { return n ? static_cast<std::size_t>(next_u64() % n) : 0; }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = mean + stddev * normal();
    return t;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace mtgflow
