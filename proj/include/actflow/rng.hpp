#pragma once

#include <cmath>
#include <cstdint>

namespace actflow {

// Counter-based pseudo-random stream: output i is a SplitMix64-style hash of
// (key, i), so a stream is fully described by its key and counter and can be
// split into independent child streams without sharing state.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix(key_, counter_++); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; values are produced in pairs and the
  // second one is cached, so draws stay deterministic per stream.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    // u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Independent child stream; deterministic in (key, stream_id).
  Rng split(std::uint64_t stream_id) const {
    return Rng(mix(key_, 0x71C946A3D0F52E6DULL ^ stream_id));
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t key, std::uint64_t counter) {
    std::uint64_t z = key + 0x9E3779B97F4A7C15ULL * (counter + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// FNV-1a over bytes; used for text-based splits and archive checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace actflow
