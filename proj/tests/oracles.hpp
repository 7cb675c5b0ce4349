#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vitkd/tensor.hpp"

// Plain-loop reference implementations of the distillation losses, written
// independently of the library's tensor ops.
namespace vitkd::oracle {

// f is [b×N×D]; returns b stacked N×N matrices.
inline std::vector<double> correlation(const Tensor& f) {
  const std::size_t b = f.dim(0), n = f.dim(1), d = f.dim(2);
  const auto x = f.data();
  std::vector<double> m(b * n * n, 0.0);
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += double(x[(s * n + i) * d + k]) * x[(s * n + j) * d + k];
        m[(s * n + i) * n + j] = acc / std::sqrt(double(d));
      }
    }
  }
  return m;
}

// Σ_i Σ_j (F^T − (F^S·W + b))², batch-mean.
inline double mimic_linear(const Tensor& fs, const Tensor& ft, const Tensor& w, const Tensor& bias) {
  const std::size_t b = fs.dim(0), n = fs.dim(1), ds = fs.dim(2), dt = ft.dim(2);
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dt; ++j) {
        double y = bias.data()[j];
        for (std::size_t k = 0; k < ds; ++k) y += double(fs.data()[(s * n + i) * ds + k]) * w.data()[k * dt + j];
        const double r = ft.data()[(s * n + i) * dt + j] - y;
        total += r * r;
      }
    }
  }
  return total / double(b);
}

inline double mimic_corr(const Tensor& fs, const Tensor& ft) {
  const auto ms = correlation(fs), mt = correlation(ft);
  double total = 0.0;
  for (std::size_t i = 0; i < ms.size(); ++i) total += (mt[i] - ms[i]) * (mt[i] - ms[i]);
  return total / double(fs.dim(0));
}

// Keeps only the masked rows, then sums squared residuals over them.
inline double generation(const Tensor& gen, const Tensor& ft, const std::vector<std::uint8_t>& mask) {
  const std::size_t b = gen.dim(0), n = gen.dim(1), d = gen.dim(2);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < b * n; ++r) {
    if (mask[r]) rows.push_back(r);
  }
  double total = 0.0;
  for (auto r : rows) {
    for (std::size_t j = 0; j < d; ++j) {
      const double e = double(ft.data()[r * d + j]) - gen.data()[r * d + j];
      total += e * e;
    }
  }
  return total / double(b);
}

}  // namespace vitkd::oracle
