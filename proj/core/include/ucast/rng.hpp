#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace ucast {

/// Seeded mt19937_64 with explicit (distribution-free) uniform/normal draws so
/// that a serialized state resumes the exact same stream. std:: distributions
/// carry hidden state and are skipped on purpose.
class Rng {
 public:
  Rng() : engine_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n-1] via rejection-free modulo of a 64-bit draw
  /// (bias is negligible for n << 2^64 and determinism is what matters here).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Derive an independent child stream (used to give each consumer a seed).
  uint64_t fork_seed() { return engine_(); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw std::invalid_argument("Rng::deserialize: bad state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ucast
