#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitkd/layers.hpp"
#include "vitkd/vit.hpp"

namespace vitkd {

// fc(·) aligning student width D_S to teacher width D_T.
struct LinearAdapter {
  Linear fc;  // weight [D_S×D_T], bias [D_T]

  static LinearAdapter make(std::size_t student_dim, std::size_t teacher_dim, Rng& rng);
  static LinearAdapter identity(std::size_t dim);
  std::size_t output_dim() const { return fc.weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return fc(x); }
};

// Realised random token mask: mask[b·N + i] = 1 iff r_i < lambda.
struct MaskSpec {
  double lambda = 0.0;
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::vector<std::uint8_t> mask;

  std::size_t masked_count() const;
  double masked_fraction() const;
  std::vector<float> as_weights() const;
  std::vector<std::uint8_t> visible() const;
};

enum class MimicMethod { kLinear, kCorrelation };
enum class GenBlockKind { kConv, kSelfAttn, kCrossAttn };

std::string to_string(MimicMethod m);
std::string to_string(GenBlockKind k);
MimicMethod mimic_method_from_string(const std::string& s);
GenBlockKind gen_block_from_string(const std::string& s);

struct KdSettings {
  bool enabled = false;
  double temperature = 1.0;
  double weight = 1.0;
};

struct DistillConfig {
  double alpha = 3e-5;
  double beta = 3e-6;
  double lambda = 0.5;
  std::vector<std::size_t> shallow_layers{0, 1};
  // Negative selects the last layer of each model.
  long deep_layer = -1;
  MimicMethod mimic_method = MimicMethod::kLinear;
  GenBlockKind gen_block = GenBlockKind::kConv;
  TapSource tap_source = TapSource::kFfnOut;
  // Distil the deep layer after the final norm instead of before it.
  bool deep_post_norm = false;
  std::size_t gen_depth = 2;
  bool cross_attn_ffn = true;
  KdSettings kd;

  std::size_t deep_layer_for(std::size_t depth) const;
  // Throws ConfigError on any violated invariant.
  void validate(std::size_t student_depth, std::size_t teacher_depth) const;
};

struct LossBreakdown {
  double l_ori = 0.0;
  double l_mimic = 0.0;
  double l_gen = 0.0;
  double l_kd = 0.0;
  double total = 0.0;
};

// Σ_i Σ_j (F^T − fc(F^S))², batch-mean. The teacher side is a constant.
Tensor loss_mimic_linear(const FeatureMap& fs, const FeatureMap& ft, const LinearAdapter& adapter);

// F·Fᵀ/√D for f of shape [N×D] or [b×N×D].
Tensor correlation_matrix(const Tensor& f);

// Σ_{i,j} (M^T − M^S)², batch-mean. D_S and D_T may differ.
Tensor loss_mimic_corr(const FeatureMap& fs, const FeatureMap& ft);

// Fresh i.i.d. draw for every token of every sample.
MaskSpec make_mask(std::size_t batch, std::size_t tokens, double lambda, Rng& rng);

// Replaces masked rows of the aligned student feature by the learnable token.
Tensor apply_mask(const Tensor& fs_aligned, const MaskSpec& mask, const Tensor& masked_token);

// Σ_i Mask_i Σ_j (F^T − G(F̂^S))², batch-mean; unmasked rows contribute 0.
Tensor loss_generation(const Tensor& gen_out, const FeatureMap& ft, const MaskSpec& mask);

// T²·KL(softmax(z_T/T) ‖ softmax(z_S/T)), batch-mean.
Tensor loss_kd_logit(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

// L = L_ori + α·L_mimic + β·L_gen (+ w·L_kd when enabled).
LossBreakdown loss_total(double l_ori, double l_mimic, double l_gen, double l_kd, const DistillConfig& cfg);

}  // namespace vitkd
