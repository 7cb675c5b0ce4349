#pragma once

#include <cmath>
#include <vector>

#include "doctest.h"
#include "vitkd/rng.hpp"
#include "vitkd/tensor.hpp"

namespace vitkd::test {

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline void check_close(const Tensor& t, const std::vector<float>& expected, double tol = 1e-6) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    INFO("element ", i, ": ", t.data()[i], " vs ", expected[i]);
    CHECK(std::abs(t.data()[i] - expected[i]) <= tol);
  }
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace vitkd::test
