#pragma once

#include <cstdint>
#include <vector>

#include "vitkd/grad_check.hpp"

namespace vitkd {

// Finite-difference audit of every distillation loss, the three generative
// blocks, the masked-token path and one encoder layer, each on a random
// 4-token × 8-dim instance.
std::vector<GradCheckReport> run_grad_audit(std::uint64_t seed = 2024, const GradCheckOptions& options = {});

}  // namespace vitkd
