#include "vitkd/attn_export.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vitkd/error.hpp"

namespace vitkd {

std::vector<unsigned char> attn_to_pixels(const Tensor& matrix) {
  auto v = matrix.data();
  const float max = v.empty() ? 0.0f : *std::max_element(v.begin(), v.end());
  std::vector<unsigned char> px(v.size(), 0);
  if (!(max > 0.0f)) return px;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double scaled = std::round(255.0 * static_cast<double>(v[i]) / static_cast<double>(max));
    px[i] = static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0));
  }
  return px;
}

AttnExportPaths attn_export(const Tensor& matrix, const std::string& path_prefix) {
  if (matrix.rank() != 2) throw ShapeError("attn_export: expected a matrix, got " + shape_str(matrix.shape()));
  const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
  AttnExportPaths paths{path_prefix + ".csv", path_prefix + ".pgm"};

  std::ofstream csv(paths.csv);
  if (!csv) throw IoError("cannot open '" + paths.csv.string() + "' for writing");
  auto v = matrix.data();
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(v[r * cols + c]));
      if (c) csv << ',';
      csv << buf;
    }
    csv << '\n';
  }
  csv.close();
  if (!csv) throw IoError("failed writing '" + paths.csv.string() + "'");

  std::ofstream pgm(paths.pgm, std::ios::binary);
  if (!pgm) throw IoError("cannot open '" + paths.pgm.string() + "' for writing");
  pgm << "P5\n" << cols << ' ' << rows << "\n255\n";
  const auto px = attn_to_pixels(matrix);
  pgm.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  pgm.close();
  if (!pgm) throw IoError("failed writing '" + paths.pgm.string() + "'");
  return paths;
}

Tensor read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<float> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw FormatError("'" + path.string() + "': bad number '" + cell + "' on row " + std::to_string(rows));
      }
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw FormatError("'" + path.string() + "': ragged row " + std::to_string(rows));
    ++rows;
  }
  if (rows == 0) throw FormatError("'" + path.string() + "' is empty");
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace vitkd
