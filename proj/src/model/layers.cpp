#include "vitkd/layers.hpp"

#include <cmath>

namespace vitkd {

Tensor trunc_normal(Shape shape, Rng& rng, float std) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.truncated_normal(std);
  return t.set_requires_grad(true);
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.weight = trunc_normal({in, out}, rng);
  l.bias = Tensor::zeros({out}).set_requires_grad(true);
  return l;
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Norm Norm::make(std::size_t dim) {
  Norm n;
  n.gamma = Tensor::ones({dim}).set_requires_grad(true);
  n.beta = Tensor::zeros({dim}).set_requires_grad(true);
  return n;
}

void Norm::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Mlp Mlp::make(std::size_t dim, std::size_t hidden, Rng& rng) {
  Mlp m;
  m.fc1 = Linear::make(dim, hidden, rng);
  m.fc2 = Linear::make(hidden, dim, rng);
  return m;
}

void Mlp::collect(const std::string& prefix, NamedTensors& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

MultiHeadAttention MultiHeadAttention::make(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MultiHeadAttention a;
  a.heads = heads;
  a.q = Linear::make(dim, dim, rng);
  a.k = Linear::make(dim, dim, rng);
  a.v = Linear::make(dim, dim, rng);
  a.proj = Linear::make(dim, dim, rng);
  return a;
}

MultiHeadAttention::Output MultiHeadAttention::operator()(const Tensor& query, const Tensor& key,
                                                          const Tensor& value,
                                                          std::span<const std::uint8_t> key_allowed) const {
  const std::size_t dim = query.dim(-1);
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dim / heads));
  Tensor qh = split_heads(q(query), heads);
  Tensor kh = split_heads(k(key), heads);
  Tensor vh = split_heads(v(value), heads);
  Tensor scores = scale(batched_matmul(qh, kh, /*transpose_b=*/true), scale_factor);
  Tensor weights = key_allowed.empty() ? softmax_rows(scores) : masked_softmax_rows(scores, key_allowed, heads);
  Tensor ctx = merge_heads(batched_matmul(weights, vh), heads);
  return {proj(ctx), weights};
}

void MultiHeadAttention::collect(const std::string& prefix, NamedTensors& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  proj.collect(prefix + ".proj", out);
}

EncoderLayer EncoderLayer::make(std::size_t dim, std::size_t heads, std::size_t mlp_hidden, Rng& rng) {
  EncoderLayer l;
  l.norm1 = Norm::make(dim);
  l.attn = MultiHeadAttention::make(dim, heads, rng);
  l.norm2 = Norm::make(dim);
  l.mlp = Mlp::make(dim, mlp_hidden, rng);
  return l;
}

EncoderLayer::Output EncoderLayer::operator()(const Tensor& x, const Tensor& pos) const {
  Tensor h = norm1(x);
  Tensor qk = pos.defined() ? add_broadcast(h, pos) : h;
  auto a = attn(qk, qk, h);
  Tensor mha_out = add(x, a.out);
  Tensor y = add(mha_out, mlp(norm2(mha_out)));
  return {y, mha_out, a.weights};
}

void EncoderLayer::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  mlp.collect(prefix + ".mlp", out);
}

}  // namespace vitkd
