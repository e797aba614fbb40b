#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace radt {

using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

// ---------------------------------------------------------------------------
// Hashing / seed derivation
// ---------------------------------------------------------------------------

constexpr u64 kFnvBasis = 0xcbf29ce484222325ULL;
constexpr u64 kFnvPrime = 0x100000001b3ULL;

inline u64 fnv1a(const void* data, std::size_t n, u64 h = kFnvBasis) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline u64 fnv1a(std::string_view s, u64 h = kFnvBasis) {
  return fnv1a(s.data(), s.size(), h);
}

inline u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seed splitting: child streams are identified by a string tag
// plus up to two integer indices. Documented contract: changing any component
// yields an unrelated stream.
inline u64 derive_seed(u64 root, std::string_view tag, u64 a = 0, u64 b = 0) {
  u64 h = fnv1a(tag, kFnvBasis ^ splitmix64(root));
  h = splitmix64(h ^ splitmix64(a + 0x9e37));
  h = splitmix64(h ^ splitmix64(b + 0x79b9));
  return h;
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64 engine with hand-rolled distributions so that streams are
// stable across standard library versions.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(u64 seed = 0) : engine_(seed) {}

  u64 next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  u64 uniform_int(u64 n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
    u64 threshold = (0 - n) % n;  // rejection sampling, unbiased
    for (;;) {
      u64 r = engine_();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal via Box-Muller (no cached spare: stream-stable)
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw std::runtime_error("Rng: bad serialized state");
  }

 private:
  std::mt19937_64 engine_;
};

// Stateless hash-based uniform in [0,1): used for dropout masks so that the
// same (seed, step, tag, index) always yields the same decision regardless of
// evaluation order or thread count.
inline float hash_uniform(u64 seed, u64 step, u64 tag, u64 idx) {
  u64 h = splitmix64(seed ^ splitmix64(step ^ 0x5851f42d4c957f2dULL));
  h = splitmix64(h ^ splitmix64(tag));
  h = splitmix64(h ^ idx);
  return static_cast<float>(h >> 40) * 0x1.0p-24f;
}

}  // namespace radt
