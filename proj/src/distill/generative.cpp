#include "vitkd/generative.hpp"

#include <cmath>

namespace vitkd {

namespace {

std::size_t square_grid(std::size_t tokens) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
  if (g * g != tokens) {
    throw ConfigError("conv projector needs a square token grid, got " + std::to_string(tokens) + " tokens");
  }
  return g;
}

// PyTorch-style default conv init: U(±1/√fan_in).
Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t.set_requires_grad(true);
}

}  // namespace

ConvProjector ConvProjector::make(std::size_t dim, std::size_t tokens, Rng& rng) {
  ConvProjector c;
  c.grid = square_grid(tokens);
  const std::size_t fan_in = dim * 9;
  c.kernel1 = uniform_fan_in({dim, dim, 3, 3}, fan_in, rng);
  c.bias1 = uniform_fan_in({dim}, fan_in, rng);
  c.kernel2 = uniform_fan_in({dim, dim, 3, 3}, fan_in, rng);
  c.bias2 = uniform_fan_in({dim}, fan_in, rng);
  return c;
}

Tensor ConvProjector::operator()(const Tensor& x) const {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) throw ShapeError("conv projector: expected [b×N×D] or [N×D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(-2), d = x.dim(-1);
  if (n != grid * grid) {
    throw ShapeError("conv projector built for " + std::to_string(grid * grid) + " tokens, got " + std::to_string(n));
  }
  const std::size_t b = batched ? x.dim(0) : 1;
  Tensor x3 = batched ? x : reshape(x, {1, n, d});
  Tensor img = reshape(transpose_last2(x3), {b, d, grid, grid});
  Tensor h = relu(conv3x3(img, kernel1, bias1));
  Tensor y = conv3x3(h, kernel2, bias2);
  Tensor tokens = transpose_last2(reshape(y, {b, d, n}));
  return batched ? tokens : reshape(tokens, {n, d});
}

void ConvProjector::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".conv1.kernel", kernel1);
  out.emplace_back(prefix + ".conv1.bias", bias1);
  out.emplace_back(prefix + ".conv2.kernel", kernel2);
  out.emplace_back(prefix + ".conv2.bias", bias2);
}

SelfAttnGenerator SelfAttnGenerator::make(std::size_t dim, std::size_t tokens, std::size_t heads, std::size_t depth,
                                          std::size_t mlp_ratio, Rng& rng) {
  SelfAttnGenerator g;
  g.pos = trunc_normal({tokens, dim}, rng);
  for (std::size_t i = 0; i < depth; ++i) g.layers.push_back(EncoderLayer::make(dim, heads, dim * mlp_ratio, rng));
  return g;
}

Tensor SelfAttnGenerator::operator()(const Tensor& x) const {
  const bool batched = x.rank() == 3;
  Tensor h = batched ? x : reshape(x, {1, x.dim(0), x.dim(1)});
  for (const auto& layer : layers) h = layer(h, pos).y;
  return batched ? h : reshape(h, x.shape());
}

void SelfAttnGenerator::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".pos", pos);
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layers." + std::to_string(i), out);
}

CrossAttnGenerator CrossAttnGenerator::make(std::size_t dim, std::size_t tokens, std::size_t heads,
                                            std::size_t depth, std::size_t mlp_ratio, bool use_ffn, Rng& rng) {
  CrossAttnGenerator g;
  g.pos = trunc_normal({tokens, dim}, rng);
  for (std::size_t i = 0; i < depth; ++i) {
    CrossAttnLayer l;
    l.norm_q = Norm::make(dim);
    l.norm_kv = Norm::make(dim);
    l.attn = MultiHeadAttention::make(dim, heads, rng);
    l.norm2 = Norm::make(dim);
    l.mlp = Mlp::make(dim, dim * mlp_ratio, rng);
    l.use_ffn = use_ffn;
    g.layers.push_back(std::move(l));
  }
  return g;
}

Tensor CrossAttnGenerator::operator()(const Tensor& x, const MaskSpec& mask) const {
  const bool batched = x.rank() == 3;
  Tensor x3 = batched ? x : reshape(x, {1, x.dim(0), x.dim(1)});
  const std::size_t b = x3.dim(0), n = x3.dim(1);
  if (mask.mask.size() != b * n) {
    throw ShapeError("cross-attention generator: mask of " + std::to_string(mask.mask.size()) +
                     " tokens for input " + shape_str(x.shape()));
  }
  bool any_masked = false;
  for (std::size_t s = 0; s < b; ++s) {
    std::size_t masked = 0;
    for (std::size_t i = 0; i < n; ++i) masked += mask.mask[s * n + i] ? 1 : 0;
    if (masked == n) {
      throw DegenerateAttentionError("cross-attention generator: sample " + std::to_string(s) +
                                     " has every token masked, so there is no key to attend to");
    }
    any_masked = any_masked || masked > 0;
  }
  if (!any_masked) return x;

  const auto visible = mask.visible();
  Tensor q = x3;
  for (const auto& layer : layers) {
    Tensor kv = layer.norm_kv(x3);
    auto a = layer.attn(add_broadcast(layer.norm_q(q), pos), add_broadcast(kv, pos), kv, visible);
    q = add(q, a.out);
    if (layer.use_ffn) q = add(q, layer.mlp(layer.norm2(q)));
  }
  Tensor out = select_rows(mask.mask, q, x3);
  return batched ? out : reshape(out, x.shape());
}

void CrossAttnGenerator::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".pos", pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + ".layers." + std::to_string(i);
    layers[i].norm_q.collect(p + ".norm_q", out);
    layers[i].norm_kv.collect(p + ".norm_kv", out);
    layers[i].attn.collect(p + ".attn", out);
    if (layers[i].use_ffn) {
      layers[i].norm2.collect(p + ".norm2", out);
      layers[i].mlp.collect(p + ".mlp", out);
    }
  }
}

GenerativeBlock::GenerativeBlock(const GenerativeBlockConfig& cfg, Rng& rng) : cfg_(cfg) {
  masked_token_ = trunc_normal({cfg.dim}, rng);
  switch (cfg.kind) {
    case GenBlockKind::kConv:
      impl_ = ConvProjector::make(cfg.dim, cfg.tokens, rng);
      break;
    case GenBlockKind::kSelfAttn:
      impl_ = SelfAttnGenerator::make(cfg.dim, cfg.tokens, cfg.heads, cfg.depth, cfg.mlp_ratio, rng);
      break;
    case GenBlockKind::kCrossAttn:
      impl_ = CrossAttnGenerator::make(cfg.dim, cfg.tokens, cfg.heads, cfg.depth, cfg.mlp_ratio,
                                       cfg.cross_attn_ffn, rng);
      break;
  }
}

Tensor GenerativeBlock::operator()(const Tensor& masked_feature, const MaskSpec& mask) const {
  if (const auto* c = std::get_if<ConvProjector>(&impl_)) return (*c)(masked_feature);
  if (const auto* s = std::get_if<SelfAttnGenerator>(&impl_)) return (*s)(masked_feature);
  return std::get<CrossAttnGenerator>(impl_)(masked_feature, mask);
}

NamedTensors GenerativeBlock::parameters() const {
  NamedTensors out;
  out.emplace_back("gen.masked_token", masked_token_);
  std::visit([&out](const auto& g) { g.collect("gen", out); }, impl_);
  return out;
}

}  // namespace vitkd
