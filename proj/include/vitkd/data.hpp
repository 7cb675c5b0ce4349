#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

struct Dataset {
  Tensor images;  // [B×3×S×S], values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return images.dim(-1); }
  // Copies the selected samples into a fresh [k×3×S×S] tensor.
  Tensor gather_images(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  // FNV-1a over the pixels and label of one sample.
  std::uint64_t sample_hash(std::size_t index) const;
};

constexpr std::size_t kSynthClasses = 10;
constexpr float kSynthNoise = 0.1f;

struct SynthOptions {
  // Largest centre offset, as a fraction of the image size.
  float jitter = 0.125f;
  // Foreground/background gap is drawn uniformly from this range.
  float contrast_min = 0.15f;
  float contrast_max = 0.4f;
  float noise = kSynthNoise;
};

// Procedural classes, in label order: horizontal, vertical, diagonal and
// anti-diagonal bars, fine and coarse checkerboards, disk, ring, cross,
// horizontal gradient. Each sample gets a random offset, contrast and colour
// gain plus N(0, 0.1²) pixel noise, then is clipped to [0, 1].
Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class, std::size_t classes = kSynthClasses,
                       std::size_t size = 32, const std::string& split = "train", const SynthOptions& options = {});

// Big-endian IDX pair: images magic 0x00000803 [n×rows×cols] (u8), labels
// magic 0x00000801 [n] (u8). Grayscale is replicated to three channels, scaled
// to [0, 1] and centre padded or cropped to `size`.
Dataset idx_load(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t size = 32, std::size_t num_classes = 10, const std::string& split = "train");

struct Separability {
  double mean_inter = 0.0;  // mean pairwise L2 distance between class means
  double mean_intra = 0.0;  // mean L2 distance between the class means of two random halves of a class
  double ratio() const { return mean_intra > 0.0 ? mean_inter / mean_intra : 0.0; }
};

Separability class_separability(const Dataset& data, std::uint64_t seed);

}  // namespace vitkd
