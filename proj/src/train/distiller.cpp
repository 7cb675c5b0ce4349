#include <algorithm>
#include <cstring>

#include "vitkd/error.hpp"
#include "vitkd/trainer.hpp"

namespace vitkd {

TeacherCacheSpec TeacherCacheSpec::for_config(const DistillConfig& cfg, std::size_t teacher_depth) {
  TeacherCacheSpec s;
  if (cfg.alpha != 0.0) s.layers = cfg.shallow_layers;
  std::sort(s.layers.begin(), s.layers.end());
  s.source = cfg.tap_source;
  s.need_deep = cfg.beta != 0.0;
  s.deep_layer = cfg.deep_layer_for(teacher_depth);
  s.deep_post_norm = cfg.deep_post_norm;
  return s;
}

TeacherCacheSpec TeacherCacheSpec::merged(const TeacherCacheSpec& other) const {
  if (source != other.source || deep_layer != other.deep_layer || deep_post_norm != other.deep_post_norm) {
    throw ConfigError("teacher caches with different tap settings cannot be merged");
  }
  TeacherCacheSpec s = *this;
  s.layers.insert(s.layers.end(), other.layers.begin(), other.layers.end());
  std::sort(s.layers.begin(), s.layers.end());
  s.layers.erase(std::unique(s.layers.begin(), s.layers.end()), s.layers.end());
  s.need_deep = need_deep || other.need_deep;
  return s;
}

TeacherCache::TeacherCache(const VisionTransformer& teacher, const Tensor& images, TeacherCacheSpec spec,
                           std::size_t batch_size)
    : spec_(std::move(spec)) {
  const auto& tc = teacher.config();
  for (auto l : spec_.layers) {
    if (l >= tc.depth) throw ConfigError("teacher has no layer " + std::to_string(l));
  }
  if (spec_.need_deep && spec_.deep_layer >= tc.depth) {
    throw ConfigError("teacher has no layer " + std::to_string(spec_.deep_layer));
  }
  if (images.rank() != 4) throw ShapeError("teacher cache: expected [b×3×S×S] images");
  count_ = images.dim(0);
  tokens_ = tc.num_patches();
  dim_ = tc.dim;
  classes_ = tc.num_classes;
  const std::size_t row = tokens_ * dim_;
  layers_.assign(spec_.layers.size(), std::vector<float>(count_ * row));
  if (spec_.need_deep) deep_.resize(count_ * row);
  logits_.resize(count_ * classes_);

  NoGradGuard no_grad;
  const std::size_t per_image = images.numel() / count_;
  const std::size_t image_size = images.dim(-1);
  for (std::size_t start = 0; start < count_; start += batch_size) {
    const std::size_t b = std::min(batch_size, count_ - start);
    auto src = images.data().subspan(start * per_image, b * per_image);
    Tensor chunk({b, 3, image_size, image_size}, std::vector<float>(src.begin(), src.end()));
    const auto fr = teacher.forward(chunk);
    for (std::size_t k = 0; k < spec_.layers.size(); ++k) {
      auto d = fr.tap(spec_.layers[k], spec_.source).tokens.data();
      std::copy(d.begin(), d.end(), layers_[k].begin() + static_cast<long>(start * row));
    }
    if (spec_.need_deep) {
      auto d = spec_.deep_post_norm ? fr.final_tokens.data() : fr.tap(spec_.deep_layer, spec_.source).tokens.data();
      std::copy(d.begin(), d.end(), deep_.begin() + static_cast<long>(start * row));
    }
    auto lg = fr.logits.data();
    std::copy(lg.begin(), lg.end(), logits_.begin() + static_cast<long>(start * classes_));
  }
}

bool TeacherCache::covers(const TeacherCacheSpec& spec) const {
  if (spec.source != spec_.source && !spec.layers.empty()) return false;
  for (auto l : spec.layers) {
    if (std::find(spec_.layers.begin(), spec_.layers.end(), l) == spec_.layers.end()) return false;
  }
  if (spec.need_deep) {
    if (!spec_.need_deep || spec.deep_layer != spec_.deep_layer || spec.deep_post_norm != spec_.deep_post_norm) {
      return false;
    }
    if (!spec.deep_post_norm && spec.source != spec_.source) return false;
  }
  return true;
}

Tensor TeacherCache::gather(const std::vector<float>& store, std::size_t row, std::span<const std::size_t> indices,
                            Shape tail) const {
  Shape shape{indices.size()};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(std::move(shape));
  auto dst = out.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= count_) throw ContractError("teacher cache index out of range");
    std::memcpy(dst.data() + i * row, store.data() + indices[i] * row, row * sizeof(float));
  }
  return out;
}

Tensor TeacherCache::layer(std::size_t layer, std::span<const std::size_t> indices) const {
  const auto it = std::find(spec_.layers.begin(), spec_.layers.end(), layer);
  if (it == spec_.layers.end()) throw ContractError("teacher cache holds no layer " + std::to_string(layer));
  return gather(layers_[static_cast<std::size_t>(it - spec_.layers.begin())], tokens_ * dim_, indices,
                {tokens_, dim_});
}

Tensor TeacherCache::deep(std::span<const std::size_t> indices) const {
  if (!spec_.need_deep) throw ContractError("teacher cache holds no deep feature");
  return gather(deep_, tokens_ * dim_, indices, {tokens_, dim_});
}

Tensor TeacherCache::logits(std::span<const std::size_t> indices) const {
  return gather(logits_, classes_, indices, {classes_});
}

void require_matching_grid(const ViTConfig& student, const ViTConfig& teacher) {
  if (student.num_patches() != teacher.num_patches()) {
    throw ConfigError("teacher and student token grids differ: " + std::to_string(teacher.grid()) + "x" +
                      std::to_string(teacher.grid()) + " vs " + std::to_string(student.grid()) + "x" +
                      std::to_string(student.grid()) + " (feature losses need the same token count)");
  }
  if (student.image_size != teacher.image_size) {
    throw ConfigError("teacher and student expect different image sizes");
  }
  if (student.num_classes != teacher.num_classes) {
    throw ConfigError("teacher and student have different class counts");
  }
}

Distiller::Distiller(const ViTConfig& student, const ViTConfig& teacher, const DistillConfig& cfg, Rng& init_rng)
    : cfg_(cfg) {
  require_matching_grid(student, teacher);
  cfg_.validate(student.depth, teacher.depth);
  student_deep_ = cfg_.deep_layer_for(student.depth);
  teacher_deep_ = cfg_.deep_layer_for(teacher.depth);
  if (cfg_.mimic_method == MimicMethod::kLinear) {
    for (std::size_t i = 0; i < cfg_.shallow_layers.size(); ++i) {
      shallow_adapters_.push_back(LinearAdapter::make(student.dim, teacher.dim, init_rng));
    }
  }
  deep_adapter_ = LinearAdapter::make(student.dim, teacher.dim, init_rng);
  GenerativeBlockConfig g;
  g.kind = cfg_.gen_block;
  g.dim = teacher.dim;
  g.tokens = teacher.num_patches();
  g.heads = teacher.heads;
  g.depth = cfg_.gen_depth;
  g.mlp_ratio = teacher.mlp_ratio;
  g.cross_attn_ffn = cfg_.cross_attn_ffn;
  generator_ = std::make_unique<GenerativeBlock>(g, init_rng);
}

Distiller::Terms Distiller::compute(const ForwardResult& student, const TeacherCache& cache,
                                    std::span<const std::size_t> indices, Rng& mask_rng) const {
  Terms t;
  if (mimic_active()) {
    for (std::size_t k = 0; k < cfg_.shallow_layers.size(); ++k) {
      const std::size_t layer = cfg_.shallow_layers[k];
      const FeatureMap& fs = student.tap(layer, cfg_.tap_source);
      const FeatureMap ft{layer, cfg_.tap_source, cache.layer(layer, indices)};
      Tensor l = cfg_.mimic_method == MimicMethod::kLinear ? loss_mimic_linear(fs, ft, shallow_adapters_[k])
                                                           : loss_mimic_corr(fs, ft);
      t.l_mimic = t.l_mimic.defined() ? add(t.l_mimic, l) : l;
    }
  }
  if (gen_active()) {
    const Tensor& fs =
        cfg_.deep_post_norm ? student.final_tokens : student.tap(student_deep_, cfg_.tap_source).tokens;
    const FeatureMap ft{teacher_deep_, cfg_.tap_source, cache.deep(indices)};
    const MaskSpec mask = make_mask(fs.dim(0), fs.dim(1), cfg_.lambda, mask_rng);
    t.masked = mask.masked_count();
    Tensor masked = apply_mask(deep_adapter_(fs), mask, generator_->masked_token());
    t.l_gen = loss_generation((*generator_)(masked, mask), ft, mask);
  }
  if (kd_active()) t.l_kd = loss_kd_logit(student.logits, cache.logits(indices), cfg_.kd.temperature);
  return t;
}

NamedTensors Distiller::parameters() const {
  NamedTensors out;
  for (std::size_t k = 0; k < shallow_adapters_.size(); ++k) {
    shallow_adapters_[k].fc.collect("adapter.shallow." + std::to_string(cfg_.shallow_layers[k]), out);
  }
  deep_adapter_.fc.collect("adapter.deep", out);
  for (auto& p : generator_->parameters()) out.push_back(std::move(p));
  return out;
}

}  // namespace vitkd
