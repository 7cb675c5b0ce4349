#pragma once

#include <variant>
#include <vector>

#include "vitkd/distill_losses.hpp"
#include "vitkd/layers.hpp"

namespace vitkd {

// conv3x3 -> ReLU -> conv3x3 over the √N×√N token grid, D_T channels
// throughout.
struct ConvProjector {
  Tensor kernel1, bias1, kernel2, bias2;
  std::size_t grid = 0;

  static ConvProjector make(std::size_t dim, std::size_t tokens, Rng& rng);
  // x [b×N×D] or [N×D]
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Stack of pre-norm transformer layers in which every token attends to all
// tokens (masked rows already hold the masked token).
struct SelfAttnGenerator {
  Tensor pos;  // [N×D]
  std::vector<EncoderLayer> layers;

  static SelfAttnGenerator make(std::size_t dim, std::size_t tokens, std::size_t heads, std::size_t depth,
                                std::size_t mlp_ratio, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct CrossAttnLayer {
  Norm norm_q;
  Norm norm_kv;
  MultiHeadAttention attn;
  Norm norm2;
  Mlp mlp;
  bool use_ffn = true;
};

// Masked positions query the visible positions. Visible rows pass through
// unchanged.
struct CrossAttnGenerator {
  Tensor pos;  // [N×D], added to queries and keys
  std::vector<CrossAttnLayer> layers;

  static CrossAttnGenerator make(std::size_t dim, std::size_t tokens, std::size_t heads, std::size_t depth,
                                 std::size_t mlp_ratio, bool use_ffn, Rng& rng);
  // Throws DegenerateAttentionError when a sample has masked rows but no
  // visible row.
  Tensor operator()(const Tensor& x, const MaskSpec& mask) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct GenerativeBlockConfig {
  GenBlockKind kind = GenBlockKind::kConv;
  std::size_t dim = 64;
  std::size_t tokens = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_ratio = 4;
  bool cross_attn_ffn = true;
};

// G: maps the masked, aligned student feature [b×N×D_T] to a prediction of
// the teacher feature of the same shape.
class GenerativeBlock {
 public:
  GenerativeBlock(const GenerativeBlockConfig& cfg, Rng& rng);

  GenBlockKind kind() const { return cfg_.kind; }
  const GenerativeBlockConfig& config() const { return cfg_; }
  Tensor& masked_token() { return masked_token_; }
  const Tensor& masked_token() const { return masked_token_; }

  Tensor operator()(const Tensor& masked_feature, const MaskSpec& mask) const;
  NamedTensors parameters() const;

  ConvProjector* conv() { return std::get_if<ConvProjector>(&impl_); }
  SelfAttnGenerator* self_attn() { return std::get_if<SelfAttnGenerator>(&impl_); }
  CrossAttnGenerator* cross_attn() { return std::get_if<CrossAttnGenerator>(&impl_); }

 private:
  GenerativeBlockConfig cfg_;
  Tensor masked_token_;  // [D_T]
  std::variant<ConvProjector, SelfAttnGenerator, CrossAttnGenerator> impl_;
};

}  // namespace vitkd
