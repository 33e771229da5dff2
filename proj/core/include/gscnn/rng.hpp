#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace gscnn {

// Deterministic counter-based generator (splitmix64 core). All randomness in
// the project flows from one master seed through named sub-streams, so e.g.
// parameter init and negative sampling can be varied independently.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed * 0x9e3779b97f4a7c15ULL + 0x1ULL) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1). 53-bit mantissa, identical across platforms.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller, stateless variant (two uniforms per call, cosine branch only).
  double normal(double mean = 0.0, double sigma = 1.0) {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sigma * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Derive an independent stream for a named purpose ("init", "sampling", ...).
  Rng stream(std::string_view name) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : name) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(ch));
      h *= 0x100000001b3ULL;
    }
    return Rng(state_ ^ h);
  }

  Rng stream(std::string_view name, std::uint64_t index) const {
    Rng s = stream(name);
    s.state_ ^= (index + 1) * 0xd6e8feb86659fd93ULL;
    return s;
  }

 private:
  std::uint64_t state_;
};

}  // namespace gscnn
