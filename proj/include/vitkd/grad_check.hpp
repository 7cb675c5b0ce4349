#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

struct GradCheckInput {
  std::string name;
  Tensor tensor;
};

struct GradCheckReport {
  std::string target;
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements_checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  float step = 1e-3f;
  double tolerance = 1e-3;
  // Relative error is |a − n| / max(|a|, |n|, floor).
  double floor = 1.0;
};

// Compares the tape gradient of the scalar `f` against central differences
// for every element of every input. `f` must rebuild its graph from the
// input handles on each call.
GradCheckReport grad_check(const std::string& target, const std::function<Tensor()>& f,
                           const std::vector<GradCheckInput>& inputs, const GradCheckOptions& options = {});

}  // namespace vitkd
