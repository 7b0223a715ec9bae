#pragma once

#include <cstdint>
#include <random>

namespace mtnet {

/// Deterministic random stream. Raw mt19937_64 draws are mapped to doubles
/// directly (std:: distributions are implementation-defined and would break
/// bit-exact reproducibility across standard libraries).
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] (inclusive).
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mtnet
