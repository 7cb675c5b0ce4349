#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vitkd/layers.hpp"

namespace vitkd {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t depth = 4;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  // Fixed per-channel input normalisation (x − mean) / std.
  std::array<float, 3> input_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> input_std{0.25f, 0.25f, 0.25f};
  std::uint64_t seed = 0;

  static ViTConfig desk_student();
  static ViTConfig desk_teacher();

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

enum class TapSource { kMhaOut, kFfnOut };

std::string to_string(TapSource source);
TapSource tap_source_from_string(const std::string& name);

// Patch-token features of one layer for a batch: tokens is [b×N×D], CLS
// excluded.
struct FeatureMap {
  std::size_t layer = 0;
  TapSource source = TapSource::kFfnOut;
  Tensor tokens;
};

// One head of one sample: [(N+1)×(N+1)] row-stochastic, CLS included.
struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor matrix;
};

struct ForwardResult {
  Tensor logits;                    // [b×classes]
  std::vector<FeatureMap> taps;     // per layer: MHA-out then FFN-out
  std::vector<Tensor> attention;    // per layer: [(b·heads)×(N+1)×(N+1)]
  Tensor final_tokens;              // patch tokens after the final norm

  const FeatureMap& tap(std::size_t layer, TapSource source) const;
};

// image [3×H×W] -> [N×3p²]; raster-order patches, each flattened
// channel-major then row-major.
Tensor patchify(const Tensor& image, const ViTConfig& cfg);
// images [b×3×H×W] -> [b×N×3p²], optionally applying the config's input
// normalisation on the way.
Tensor patchify_batch(const Tensor& images, const ViTConfig& cfg, bool normalize = false);

// DeiT-style encoder: patch embedding, CLS token, learned positions, pre-norm
// layers, final norm and a linear head on the CLS token.
class VisionTransformer {
 public:
  explicit VisionTransformer(const ViTConfig& cfg);

  const ViTConfig& config() const { return cfg_; }
  ForwardResult forward(const Tensor& images) const;

  NamedTensors parameters() const;
  void set_requires_grad(bool on);
  // Bitwise digest of every parameter (FNV-1a over the raw bytes).
  std::uint64_t checksum() const;

  std::vector<EncoderLayer>& layers() { return layers_; }
  const std::vector<EncoderLayer>& layers() const { return layers_; }

 private:
  ViTConfig cfg_;
  Linear patch_embed_;
  Tensor cls_token_;
  Tensor pos_embed_;
  std::vector<EncoderLayer> layers_;
  Norm norm_;
  Linear head_;
};

// Splits one layer's attention tensor into per-sample, per-head maps.
std::vector<AttentionMap> attention_maps(const Tensor& layer_attention, std::size_t layer, std::size_t heads);
// Mean over every map of `layer` in the list (heads and samples).
Tensor attention_average(const std::vector<AttentionMap>& maps, std::size_t layer);
// Mean of the diagonal of a square matrix.
double diagonal_mass(const Tensor& matrix);

std::uint64_t checksum(const NamedTensors& tensors);

}  // namespace vitkd
