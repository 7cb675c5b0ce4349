#include "vitkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vitkd/error.hpp"
#include "vitkd/rng.hpp"

namespace vitkd {

Tensor Dataset::gather_images(std::span<const std::size_t> indices) const {
  const std::size_t s = image_size();
  const std::size_t per = 3 * s * s;
  Tensor out({indices.size(), 3, s, s});
  auto src = images.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw ContractError("dataset index " + std::to_string(indices[i]) + " out of range");
    std::memcpy(dst.data() + i * per, src.data() + indices[i] * per, per * sizeof(float));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return {gather_images(indices), gather_labels(indices), num_classes, split};
}

std::uint64_t Dataset::sample_hash(std::size_t index) const {
  const std::size_t s = image_size();
  const std::size_t per = 3 * s * s;
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(images.data().data() + index * per);
  for (std::size_t i = 0; i < per * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  h ^= static_cast<std::uint64_t>(labels[index]);
  h *= 1099511628211ULL;
  return h;
}

namespace {

bool in_stripe(float t, float period) {
  const float r = t - period * std::floor(t / period);
  return r < period * 0.5f;
}

// Foreground indicator of class `cls` at pixel offset (u, v) from the
// (jittered) image centre.
float pattern(std::size_t cls, float u, float v, float half) {
  const float r = std::sqrt(u * u + v * v);
  switch (cls) {
    case 0: return in_stripe(v, 8.0f) ? 1.0f : 0.0f;
    case 1: return in_stripe(u, 8.0f) ? 1.0f : 0.0f;
    case 2: return in_stripe(u + v, 11.0f) ? 1.0f : 0.0f;
    case 3: return in_stripe(u - v, 11.0f) ? 1.0f : 0.0f;
    case 4: return in_stripe(u, 8.0f) == in_stripe(v, 8.0f) ? 1.0f : 0.0f;
    case 5: return in_stripe(u, 16.0f) == in_stripe(v, 16.0f) ? 1.0f : 0.0f;
    case 6: return r < 0.45f * half ? 1.0f : 0.0f;
    case 7: return std::abs(r - 0.6f * half) < 0.15f * half ? 1.0f : 0.0f;
    case 8: return std::abs(u) < 0.2f * half || std::abs(v) < 0.2f * half ? 1.0f : 0.0f;
    default: return std::clamp(0.5f + u / (2.0f * half), 0.0f, 1.0f);
  }
}

}  // namespace

Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, std::size_t size,
                       const std::string& split, const SynthOptions& options) {
  if (classes == 0 || classes > kSynthClasses) {
    throw ConfigError("synthetic dataset supports 1.." + std::to_string(kSynthClasses) + " classes, got " +
                      std::to_string(classes));
  }
  if (n_per_class == 0) throw ConfigError("synthetic dataset needs at least one sample per class");
  if (size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");

  const std::size_t total = n_per_class * classes;
  Dataset d;
  d.num_classes = classes;
  d.split = split;
  d.images = Tensor({total, 3, size, size});
  d.labels.resize(total);
  auto px = d.images.data();
  Rng rng(seed);
  const float half = static_cast<float>(size) * 0.5f;
  if (!(options.contrast_min >= 0.0f && options.contrast_min <= options.contrast_max && options.contrast_max <= 1.0f)) {
    throw ConfigError("synthetic contrast range must satisfy 0 <= min <= max <= 1");
  }
  if (!(options.jitter >= 0.0f && options.jitter <= 0.5f)) throw ConfigError("synthetic jitter must lie in [0, 0.5]");
  if (!(options.noise >= 0.0f)) throw ConfigError("synthetic noise must be non-negative");
  const float max_shift = static_cast<float>(size) * options.jitter;
  for (std::size_t i = 0; i < total; ++i) {
    const auto cls = i % classes;
    d.labels[i] = static_cast<int>(cls);
    const float dx = rng.uniform(-max_shift, max_shift);
    const float dy = rng.uniform(-max_shift, max_shift);
    const float contrast = rng.uniform(options.contrast_min, options.contrast_max);
    float gain[3];
    for (auto& g : gain) g = rng.uniform(0.8f, 1.2f);
    float* img = px.data() + i * 3 * size * size;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const float u = static_cast<float>(x) + 0.5f - half - dx;
        const float v = static_cast<float>(y) + 0.5f - half - dy;
        const float base = 0.5f + contrast * (pattern(cls, u, v, half) - 0.5f);
        for (std::size_t c = 0; c < 3; ++c) {
          const float value = 0.5f + gain[c] * (base - 0.5f) + options.noise * static_cast<float>(rng.normal());
          img[(c * size + y) * size + x] = std::clamp(value, 0.0f, 1.0f);
        }
      }
    }
  }
  return d;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw FormatError("'" + path.string() + "' is truncated (header)");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace

Dataset idx_load(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t size, std::size_t num_classes, const std::string& split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const auto img_magic = be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    throw FormatError("'" + images_path.string() + "': bad image magic " + hex(img_magic) + " (expected 0x00000803)");
  }
  const auto lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) {
    throw FormatError("'" + labels_path.string() + "': bad label magic " + hex(lab_magic) + " (expected 0x00000801)");
  }
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t n_labels = be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("'" + images_path.string() + "' holds no pixels");
  if (img.size() < 16 + n * rows * cols) {
    throw FormatError("'" + images_path.string() + "' is truncated: expected " + std::to_string(n * rows * cols) +
                      " pixel bytes, found " + std::to_string(img.size() - 16));
  }
  if (lab.size() < 8 + n) throw FormatError("'" + labels_path.string() + "' is truncated");
  if (size == 0) throw ConfigError("target image size must be positive");

  Dataset d;
  d.num_classes = num_classes;
  d.split = split;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = lab[8 + i];
    if (static_cast<std::size_t>(label) >= num_classes) {
      throw FormatError("label " + std::to_string(label) + " at index " + std::to_string(i) + " exceeds " +
                        std::to_string(num_classes) + " classes");
    }
    d.labels[i] = label;
  }
  d.images = Tensor({n, 3, size, size});
  auto px = d.images.data();
  // Offsets of the source image inside the target (negative means crop).
  const long off_y = (static_cast<long>(size) - static_cast<long>(rows)) / 2;
  const long off_x = (static_cast<long>(size) - static_cast<long>(cols)) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* src = img.data() + 16 + i * rows * cols;
    float* dst = px.data() + i * 3 * size * size;
    for (std::size_t y = 0; y < size; ++y) {
      const long sy = static_cast<long>(y) - off_y;
      if (sy < 0 || sy >= static_cast<long>(rows)) continue;
      for (std::size_t x = 0; x < size; ++x) {
        const long sx = static_cast<long>(x) - off_x;
        if (sx < 0 || sx >= static_cast<long>(cols)) continue;
        const float v = static_cast<float>(src[sy * static_cast<long>(cols) + sx]) / 255.0f;
        for (std::size_t c = 0; c < 3; ++c) dst[(c * size + y) * size + x] = v;
      }
    }
  }
  return d;
}

namespace {

std::vector<double> class_mean(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.images.numel() / data.size();
  std::vector<double> m(per, 0.0);
  auto px = data.images.data();
  for (auto i : indices) {
    for (std::size_t j = 0; j < per; ++j) m[j] += px[i * per + j];
  }
  for (auto& v : m) v /= static_cast<double>(indices.size());
  return m;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

Separability class_separability(const Dataset& data, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> means;
  double intra = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] == static_cast<int>(c)) idx.push_back(i);
    }
    if (idx.empty()) continue;
    means.push_back(class_mean(data, idx));
    if (idx.size() < 2) continue;
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
    const std::size_t h = idx.size() / 2;
    intra += l2(class_mean(data, std::span(idx).first(h)), class_mean(data, std::span(idx).subspan(h)));
    ++counted;
  }
  Separability s;
  double inter = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      inter += l2(means[a], means[b]);
      ++pairs;
    }
  }
  s.mean_inter = pairs ? inter / static_cast<double>(pairs) : 0.0;
  s.mean_intra = counted ? intra / static_cast<double>(counted) : 0.0;
  return s;
}

}  // namespace vitkd
