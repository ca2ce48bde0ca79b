#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace vitgan {

// Counter-based random source. Every draw is a pure function of
// (seed, stream, counter), so results do not depend on evaluation order
// across threads or on how many draws other streams have consumed.
class Rng {
 public:
  Rng() : Rng(0, "root") {}
  Rng(uint64_t seed, std::string_view stream, uint64_t counter = 0)
      : seed_(seed),
        stream_(stream),
        stream_hash_(fnv1a(stream, kFnvOffset)),
        counter_(counter) {}

  // Derived stream: same seed, child label hashed on top of the parent label.
  Rng sub(std::string_view label) const {
    Rng r;
    r.seed_ = seed_;
    r.stream_ = stream_ + "/" + std::string(label);
    r.stream_hash_ = fnv1a(label, stream_hash_);
    r.counter_ = 0;
    return r;
  }

  uint64_t seed() const { return seed_; }
  const std::string& stream() const { return stream_; }
  uint64_t counter() const { return counter_; }

  uint64_t next_u64() { return mix(seed_, stream_hash_, counter_++); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, two fresh draws per call (no cached spare).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n). Fixed-point multiply, one draw.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  static uint64_t fnv1a(std::string_view s, uint64_t h) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

 private:
  static constexpr uint64_t kFnvOffset = 0xCBF29CE484222325ull;

  static uint64_t splitmix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static uint64_t mix(uint64_t seed, uint64_t stream, uint64_t counter) {
    uint64_t h = splitmix(seed + 0x9E3779B97F4A7C15ull);
    h = splitmix(h ^ stream);
    h = splitmix(h ^ counter);
    return h;
  }

  uint64_t seed_ = 0;
  std::string stream_;
  uint64_t stream_hash_ = kFnvOffset;
  uint64_t counter_ = 0;
};

}  // namespace vitgan
