#include "vitkd/vit.hpp"

#include <cstring>

namespace vitkd {

ViTConfig ViTConfig::desk_student() {
  ViTConfig c;
  c.depth = 4;
  c.dim = 32;
  c.heads = 2;
  return c;
}

ViTConfig ViTConfig::desk_teacher() {
  ViTConfig c;
  c.depth = 6;
  c.dim = 64;
  c.heads = 4;
  return c;
}

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (heads == 0 || dim == 0 || dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (depth == 0) throw ConfigError("depth must be at least 1");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be at least 1");
  if (num_classes == 0) throw ConfigError("num_classes must be at least 1");
  for (float sd : input_std) {
    if (!(sd > 0.0f)) throw ConfigError("input_std entries must be positive");
  }
}

std::string to_string(TapSource source) { return source == TapSource::kMhaOut ? "mha_out" : "ffn_out"; }

TapSource tap_source_from_string(const std::string& name) {
  if (name == "mha_out") return TapSource::kMhaOut;
  if (name == "ffn_out") return TapSource::kFfnOut;
  throw ConfigError("unknown tap source '" + name + "' (expected mha_out or ffn_out)");
}

const FeatureMap& ForwardResult::tap(std::size_t layer, TapSource source) const {
  for (const auto& t : taps) {
    if (t.layer == layer && t.source == source) return t;
  }
  throw ConfigError("no " + to_string(source) + " tap for layer " + std::to_string(layer));
}

namespace {

void patchify_into(const float* img, float* out, const ViTConfig& cfg, bool normalize) {
  const std::size_t s = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  std::size_t o = 0;
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float shift = normalize ? cfg.input_mean[c] : 0.0f;
        const float inv = normalize ? 1.0f / cfg.input_std[c] : 1.0f;
        for (std::size_t y = 0; y < p; ++y) {
          const float* row = img + c * s * s + (gy * p + y) * s + gx * p;
          for (std::size_t x = 0; x < p; ++x) out[o++] = (row[x] - shift) * inv;
        }
      }
    }
  }
}

void check_image_shape(const Shape& shape, std::size_t offset, const ViTConfig& cfg) {
  const std::size_t s = cfg.image_size;
  if (shape[offset] != 3 || shape[offset + 1] != s || shape[offset + 2] != s) {
    throw ShapeError("expected images of 3x" + std::to_string(s) + "x" + std::to_string(s) + ", got " +
                     shape_str(shape));
  }
  if (s % cfg.patch_size != 0) {
    throw ShapeError("image size " + std::to_string(s) + " is not divisible by patch size " +
                     std::to_string(cfg.patch_size));
  }
}

}  // namespace

Tensor patchify(const Tensor& image, const ViTConfig& cfg) {
  if (image.rank() != 3) throw ShapeError("patchify: expected [3×H×W], got " + shape_str(image.shape()));
  check_image_shape(image.shape(), 0, cfg);
  Tensor out({cfg.num_patches(), cfg.patch_dim()});
  patchify_into(image.data().data(), out.data().data(), cfg, false);
  return out;
}

Tensor patchify_batch(const Tensor& images, const ViTConfig& cfg, bool normalize) {
  if (images.rank() != 4) throw ShapeError("patchify_batch: expected [b×3×H×W], got " + shape_str(images.shape()));
  check_image_shape(images.shape(), 1, cfg);
  const std::size_t b = images.dim(0);
  const std::size_t per_image = 3 * cfg.image_size * cfg.image_size;
  const std::size_t per_tokens = cfg.num_patches() * cfg.patch_dim();
  Tensor out({b, cfg.num_patches(), cfg.patch_dim()});
  for (std::size_t i = 0; i < b; ++i) {
    patchify_into(images.data().data() + i * per_image, out.data().data() + i * per_tokens, cfg, normalize);
  }
  return out;
}

VisionTransformer::VisionTransformer(const ViTConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t d = cfg_.dim;
  patch_embed_ = Linear::make(cfg_.patch_dim(), d, rng);
  cls_token_ = trunc_normal({d}, rng);
  pos_embed_ = trunc_normal({cfg_.num_patches() + 1, d}, rng);
  layers_.reserve(cfg_.depth);
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    layers_.push_back(EncoderLayer::make(d, cfg_.heads, d * cfg_.mlp_ratio, rng));
  }
  norm_ = Norm::make(d);
  head_ = Linear::make(d, cfg_.num_classes, rng);
}

ForwardResult VisionTransformer::forward(const Tensor& images) const {
  if (images.rank() == 4 && images.dim(0) == 0) throw ContractError("forward: empty batch");
  const std::size_t b = images.rank() == 4 ? images.dim(0) : 0;
  if (b == 0) throw ContractError("forward: expected a [b×3×H×W] batch, got " + shape_str(images.shape()));
  const std::size_t n = cfg_.num_patches();

  ForwardResult result;
  Tensor x = patch_embed_(patchify_batch(images, cfg_, /*normalize=*/true));
  x = add_broadcast(prepend_token(x, cls_token_), pos_embed_);
  result.taps.reserve(2 * layers_.size());
  result.attention.reserve(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto out = layers_[i](x);
    result.taps.push_back({i, TapSource::kMhaOut, slice_tokens(out.mha_out, 1, n)});
    result.taps.push_back({i, TapSource::kFfnOut, slice_tokens(out.y, 1, n)});
    result.attention.push_back(out.attn);
    x = out.y;
  }
  Tensor normed = norm_(x);
  result.final_tokens = slice_tokens(normed, 1, n);
  result.logits = head_(reshape(slice_tokens(normed, 0, 1), {b, cfg_.dim}));
  return result;
}

NamedTensors VisionTransformer::parameters() const {
  NamedTensors out;
  patch_embed_.collect("patch_embed", out);
  out.emplace_back("cls_token", cls_token_);
  out.emplace_back("pos_embed", pos_embed_);
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("layers." + std::to_string(i), out);
  norm_.collect("norm", out);
  head_.collect("head", out);
  return out;
}

void VisionTransformer::set_requires_grad(bool on) {
  for (auto& [name, t] : parameters()) t.set_requires_grad(on);
}

std::uint64_t VisionTransformer::checksum() const { return vitkd::checksum(parameters()); }

std::uint64_t checksum(const NamedTensors& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.numel() * sizeof(float));
  }
  return h;
}

std::vector<AttentionMap> attention_maps(const Tensor& layer_attention, std::size_t layer, std::size_t heads) {
  if (layer_attention.rank() != 3 || heads == 0 || layer_attention.dim(0) % heads != 0 ||
      layer_attention.dim(1) != layer_attention.dim(2)) {
    throw ShapeError("attention_maps: unexpected attention tensor " + shape_str(layer_attention.shape()));
  }
  const std::size_t groups = layer_attention.dim(0), t = layer_attention.dim(1);
  std::vector<AttentionMap> maps;
  maps.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    auto src = layer_attention.data().subspan(g * t * t, t * t);
    maps.push_back({layer, g % heads, Tensor({t, t}, std::vector<float>(src.begin(), src.end()))});
  }
  return maps;
}

Tensor attention_average(const std::vector<AttentionMap>& maps, std::size_t layer) {
  std::vector<double> acc;
  Shape shape;
  std::size_t count = 0;
  for (const auto& m : maps) {
    if (m.layer != layer) continue;
    if (count == 0) {
      shape = m.matrix.shape();
      acc.assign(m.matrix.numel(), 0.0);
    } else if (m.matrix.shape() != shape) {
      throw ShapeError("attention_average: maps of different shapes");
    }
    auto d = m.matrix.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
    ++count;
  }
  if (count == 0) throw ContractError("attention_average: no map for layer " + std::to_string(layer));
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(count));
  return Tensor(shape, std::move(out));
}

double diagonal_mass(const Tensor& matrix) {
  if (matrix.rank() != 2 || matrix.dim(0) != matrix.dim(1)) {
    throw ShapeError("diagonal_mass: expected a square matrix, got " + shape_str(matrix.shape()));
  }
  const std::size_t n = matrix.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += matrix.data()[i * n + i];
  return total / static_cast<double>(n);
}

}  // namespace vitkd
