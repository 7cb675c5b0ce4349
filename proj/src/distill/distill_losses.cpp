#include "vitkd/distill_losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vitkd {

LinearAdapter LinearAdapter::make(std::size_t student_dim, std::size_t teacher_dim, Rng& rng) {
  return {Linear::make(student_dim, teacher_dim, rng)};
}

LinearAdapter LinearAdapter::identity(std::size_t dim) {
  LinearAdapter a;
  a.fc.weight = Tensor::zeros({dim, dim}).set_requires_grad(true);
  for (std::size_t i = 0; i < dim; ++i) a.fc.weight.data()[i * dim + i] = 1.0f;
  a.fc.bias = Tensor::zeros({dim}).set_requires_grad(true);
  return a;
}

std::size_t MaskSpec::masked_count() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

double MaskSpec::masked_fraction() const {
  return mask.empty() ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(mask.size());
}

std::vector<float> MaskSpec::as_weights() const { return {mask.begin(), mask.end()}; }

std::vector<std::uint8_t> MaskSpec::visible() const {
  std::vector<std::uint8_t> v(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] ? 0 : 1;
  return v;
}

std::string to_string(MimicMethod m) { return m == MimicMethod::kLinear ? "linear" : "correlation"; }

std::string to_string(GenBlockKind k) {
  switch (k) {
    case GenBlockKind::kConv: return "conv";
    case GenBlockKind::kSelfAttn: return "self_attn";
    case GenBlockKind::kCrossAttn: return "cross_attn";
  }
  return "conv";
}

MimicMethod mimic_method_from_string(const std::string& s) {
  if (s == "linear") return MimicMethod::kLinear;
  if (s == "correlation") return MimicMethod::kCorrelation;
  throw ConfigError("unknown mimic method '" + s + "' (expected linear or correlation)");
}

GenBlockKind gen_block_from_string(const std::string& s) {
  if (s == "conv") return GenBlockKind::kConv;
  if (s == "self_attn") return GenBlockKind::kSelfAttn;
  if (s == "cross_attn") return GenBlockKind::kCrossAttn;
  throw ConfigError("unknown generative block '" + s + "' (expected conv, self_attn or cross_attn)");
}

std::size_t DistillConfig::deep_layer_for(std::size_t depth) const {
  return deep_layer < 0 ? depth - 1 : static_cast<std::size_t>(deep_layer);
}

void DistillConfig::validate(std::size_t student_depth, std::size_t teacher_depth) const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("mask ratio lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  const std::size_t common = std::min(student_depth, teacher_depth);
  std::set<std::size_t> seen;
  for (auto l : shallow_layers) {
    if (l >= common) {
      throw ConfigError("shallow layer " + std::to_string(l) + " is out of range for depth " + std::to_string(common));
    }
    if (!seen.insert(l).second) throw ConfigError("shallow layer " + std::to_string(l) + " listed twice");
  }
  if (deep_layer >= 0 && static_cast<std::size_t>(deep_layer) >= common) {
    throw ConfigError("deep layer " + std::to_string(deep_layer) + " is out of range for depth " + std::to_string(common));
  }
  if (seen.count(deep_layer_for(student_depth)) != 0 || seen.count(deep_layer_for(teacher_depth)) != 0) {
    throw ConfigError("shallow and deep layer sets must be disjoint");
  }
  if (gen_depth == 0) throw ConfigError("gen_depth must be at least 1");
  if (kd.enabled && !(kd.temperature > 0.0)) throw ConfigError("kd temperature must be positive");
  if (!(kd.weight >= 0.0)) throw ConfigError("kd weight must be non-negative");
}

namespace {

std::size_t batch_of(const Tensor& t) { return t.rank() == 3 ? t.dim(0) : 1; }

void require_same_grid(const Tensor& s, const Tensor& t) {
  if (s.rank() < 2 || t.rank() != s.rank() || s.dim(-2) != t.dim(-2) || batch_of(s) != batch_of(t)) {
    throw ShapeError("token grid mismatch: student " + shape_str(s.shape()) + " vs teacher " + shape_str(t.shape()) +
                     " (student and teacher patch grids differ)");
  }
}

}  // namespace

Tensor loss_mimic_linear(const FeatureMap& fs, const FeatureMap& ft, const LinearAdapter& adapter) {
  require_same_grid(fs.tokens, ft.tokens);
  Tensor aligned = adapter(fs.tokens);
  Tensor total = squared_error(aligned, ft.tokens);
  return scale(total, 1.0f / static_cast<float>(batch_of(fs.tokens)));
}

Tensor correlation_matrix(const Tensor& f) {
  if (f.rank() != 2 && f.rank() != 3) {
    throw ShapeError("correlation_matrix: expected [N×D] or [b×N×D], got " + shape_str(f.shape()));
  }
  const bool batched = f.rank() == 3;
  Tensor f3 = batched ? f : reshape(f, {1, f.dim(0), f.dim(1)});
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(f.dim(-1)));
  Tensor m = scale(batched_matmul(f3, f3, /*transpose_b=*/true), inv_sqrt_d);
  return batched ? m : reshape(m, {f.dim(0), f.dim(0)});
}

Tensor loss_mimic_corr(const FeatureMap& fs, const FeatureMap& ft) {
  require_same_grid(fs.tokens, ft.tokens);
  Tensor ms = correlation_matrix(fs.tokens);
  Tensor mt = correlation_matrix(ft.tokens.detach());
  return scale(squared_error(ms, mt), 1.0f / static_cast<float>(batch_of(fs.tokens)));
}

MaskSpec make_mask(std::size_t batch, std::size_t tokens, double lambda, Rng& rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("mask ratio lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  MaskSpec spec;
  spec.lambda = lambda;
  spec.batch = batch;
  spec.tokens = tokens;
  spec.mask.resize(batch * tokens);
  for (auto& m : spec.mask) m = static_cast<double>(rng.uniform()) < lambda ? 1 : 0;
  return spec;
}

Tensor apply_mask(const Tensor& fs_aligned, const MaskSpec& mask, const Tensor& masked_token) {
  if (fs_aligned.numel() / fs_aligned.dim(-1) != mask.mask.size()) {
    throw ShapeError("apply_mask: mask of " + std::to_string(mask.mask.size()) + " tokens for feature " +
                     shape_str(fs_aligned.shape()));
  }
  return replace_rows(fs_aligned, mask.mask, masked_token);
}

Tensor loss_generation(const Tensor& gen_out, const FeatureMap& ft, const MaskSpec& mask) {
  if (gen_out.shape() != ft.tokens.shape()) {
    throw ShapeError("loss_generation: generated " + shape_str(gen_out.shape()) + " vs teacher " +
                     shape_str(ft.tokens.shape()));
  }
  const auto weights = mask.as_weights();
  if (weights.size() != gen_out.numel() / gen_out.dim(-1)) {
    throw ShapeError("loss_generation: mask of " + std::to_string(weights.size()) + " tokens for " +
                     shape_str(gen_out.shape()));
  }
  Tensor total = squared_error(gen_out, ft.tokens, weights);
  return scale(total, 1.0f / static_cast<float>(batch_of(gen_out)));
}

Tensor loss_kd_logit(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  return kd_kl_divergence(student_logits, teacher_logits, static_cast<float>(temperature));
}

LossBreakdown loss_total(double l_ori, double l_mimic, double l_gen, double l_kd, const DistillConfig& cfg) {
  LossBreakdown b{l_ori, l_mimic, l_gen, l_kd, 0.0};
  b.total = l_ori + cfg.alpha * l_mimic + cfg.beta * l_gen;
  if (cfg.kd.enabled) b.total += cfg.kd.weight * l_kd;
  return b;
}

}  // namespace vitkd
