#pragma once

#include "genci/types.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace genci {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic stream generator. All randomness in the project flows
// through named substreams derived from one root seed, so results do not
// depend on call order across unrelated components or on thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // uniform in [0, 1)
  Real uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // unbiased-enough index draw via multiply-shift
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  Real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    Real u1 = uniform();
    Real u2 = uniform();
    while (u1 <= 0) u1 = uniform();
    const Real r = std::sqrt(-2.0 * std::log(u1));
    const Real a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  Real spare_ = 0;
};

// Named substream: mixes the root seed with a list of tags.
inline Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(seed);
  for (std::uint64_t t : tags) s = splitmix64(s ^ splitmix64(t ^ 0x9e3779b97f4a7c15ULL));
  return Rng(s);
}

inline Rng substream(std::uint64_t seed, std::string_view name) {
  return substream(seed, {fnv1a64(name)});
}

inline Rng substream(std::uint64_t seed, std::string_view name,
                     std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(seed ^ fnv1a64(name));
  for (std::uint64_t t : tags) s = splitmix64(s ^ splitmix64(t ^ 0x9e3779b97f4a7c15ULL));
  return Rng(s);
}

}  // namespace genci
