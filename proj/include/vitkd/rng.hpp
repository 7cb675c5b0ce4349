#pragma once

#include <cstdint>
#include <random>

namespace vitkd {

// Seeded generator with distribution code written out explicitly, so that
// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1); 24 random bits so every value is an exact float.
  float uniform() { return static_cast<float>(engine_() >> 40) * 0x1.0p-24f; }
  double uniform_double() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Normal(0, std) truncated to ±2·std by resampling.
  float truncated_normal(float std);

  // Independent child stream keyed by `tag`.
  Rng fork(std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vitkd
