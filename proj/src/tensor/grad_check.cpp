#include "vitkd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vitkd {

GradCheckReport grad_check(const std::string& target, const std::function<Tensor()>& f,
                           const std::vector<GradCheckInput>& inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.target = target;

  for (const auto& in : inputs) {
    Tensor t = in.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape::current().clear();
  backward(f());

  std::vector<std::vector<float>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto g = in.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(in.tensor.numel(), 0.0f);
  }

  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k].tensor;
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float original = data[i];
      const float up = original + options.step;
      const float down = original - options.step;
      data[i] = up;
      const double f_up = f().item();
      data[i] = down;
      const double f_down = f().item();
      data[i] = original;
      // Divide by the representable step actually taken.
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (err > report.max_rel_error || report.worst_input.empty()) {
        report.max_rel_error = err;
        report.worst_input = inputs[k].name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace vitkd
