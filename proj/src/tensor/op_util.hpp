#pragma once

#include <string>

#include "vitkd/tensor.hpp"

namespace vitkd::detail {

inline void finish(const Tensor& out, const char* op) {
#ifdef VITKD_CHECK_FINITE
  check_finite(out, op);
#else
  (void)out;
  (void)op;
#endif
}

inline std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }
inline std::size_t row_count(const Tensor& t) { return t.numel() / last_dim(t); }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace vitkd::detail
