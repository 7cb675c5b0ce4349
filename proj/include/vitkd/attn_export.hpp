#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

struct AttnExportPaths {
  std::filesystem::path csv;
  std::filesystem::path pgm;
};

// Writes <prefix>.csv (row-major, six decimals) and <prefix>.pgm (binary P5,
// pixel = round(255·v / global max), all zero when the max is not positive).
AttnExportPaths attn_export(const Tensor& matrix, const std::string& path_prefix);

std::vector<unsigned char> attn_to_pixels(const Tensor& matrix);
Tensor read_matrix_csv(const std::filesystem::path& path);

}  // namespace vitkd
