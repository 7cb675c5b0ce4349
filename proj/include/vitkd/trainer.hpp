#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitkd/data.hpp"
#include "vitkd/distill_losses.hpp"
#include "vitkd/generative.hpp"
#include "vitkd/vit.hpp"

namespace vitkd {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  // Negative: 5% of the total step count.
  long warmup_steps = -1;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  // Evaluate on the test split every this many steps; 0 means once per epoch.
  std::size_t eval_every = 0;
  double label_smoothing = 0.1;
  bool hflip = false;
  // Restore the parameters of the best evaluated step at the end.
  bool keep_best = false;
  // Stop after this many optimiser steps when positive.
  std::size_t max_steps = 0;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t n_train) const;
  std::size_t total_steps(std::size_t n_train) const;
  std::size_t resolved_warmup(std::size_t total) const;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// One decoupled-decay AdamW update of a flat parameter. `t` is the 1-based
// step count used for bias correction.
void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                std::size_t t, double lr, const AdamWOptions& opt);

class AdamW {
 public:
  // Weight decay applies to tensors of rank ≥ 2 only (no biases, norms,
  // tokens or positional vectors).
  AdamW(NamedTensors params, AdamWOptions options);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const NamedTensors& params() const { return params_; }

 private:
  NamedTensors params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup 0 → lr_max over `warmup` steps, then cosine decay reaching
// lr_min at step total − 1.
double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double lr_max, double lr_min);
double cosine_lr(std::size_t step, std::size_t total, const TrainConfig& cfg);

struct EvalResult {
  double top1 = 0.0;  // percent
  double top5 = 0.0;
  std::size_t samples = 0;
};

EvalResult evaluate(const VisionTransformer& model, const Dataset& data, std::size_t batch_size = 256);
// Percent of rows whose label is among the k largest logits (strictly larger
// logits push the label down the ranking; ties favour the label).
double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k);

struct TrainRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double train_acc = 0.0;
  std::optional<double> top1;
  std::optional<double> top5;
};

std::string record_to_json(const TrainRecord& r);
TrainRecord record_from_json(const std::string& line);

using RecordSink = std::function<void(const TrainRecord&)>;

struct TrainResult {
  std::unique_ptr<VisionTransformer> model;
  std::vector<TrainRecord> records;
  EvalResult final_eval;
  std::size_t steps = 0;
};

// Supervised cross-entropy training from the model's own initialisation.
TrainResult train_supervised(const ViTConfig& model_cfg, const Dataset& train, const Dataset* test,
                             const TrainConfig& cfg, const RecordSink& sink = {});
inline TrainResult train_teacher(const ViTConfig& model_cfg, const Dataset& train, const Dataset* test,
                                 const TrainConfig& cfg, const RecordSink& sink = {}) {
  return train_supervised(model_cfg, train, test, cfg, sink);
}

// Which teacher features a distillation run reads.
struct TeacherCacheSpec {
  std::vector<std::size_t> layers;  // shallow layers
  TapSource source = TapSource::kFfnOut;
  bool need_deep = false;
  std::size_t deep_layer = 0;
  bool deep_post_norm = false;

  static TeacherCacheSpec for_config(const DistillConfig& cfg, std::size_t teacher_depth);
  // Union of the layers of both specs; deep settings must agree.
  TeacherCacheSpec merged(const TeacherCacheSpec& other) const;
};

// Frozen-teacher features and logits for a fixed set of images, computed
// once under NoGradGuard.
class TeacherCache {
 public:
  TeacherCache(const VisionTransformer& teacher, const Tensor& images, TeacherCacheSpec spec,
               std::size_t batch_size = 128);

  bool covers(const TeacherCacheSpec& spec) const;
  Tensor layer(std::size_t layer, std::span<const std::size_t> indices) const;
  Tensor deep(std::span<const std::size_t> indices) const;
  Tensor logits(std::span<const std::size_t> indices) const;
  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return count_; }

 private:
  Tensor gather(const std::vector<float>& store, std::size_t row, std::span<const std::size_t> indices,
                Shape tail) const;

  TeacherCacheSpec spec_;
  std::size_t count_ = 0, tokens_ = 0, dim_ = 0, classes_ = 0;
  std::vector<std::vector<float>> layers_;  // parallel to spec_.layers
  std::vector<float> deep_;
  std::vector<float> logits_;
};

// Adapters, generative block and masked token that sit on top of the student.
class Distiller {
 public:
  Distiller(const ViTConfig& student, const ViTConfig& teacher, const DistillConfig& cfg, Rng& init_rng);

  struct Terms {
    Tensor l_mimic;  // undefined when the term is disabled
    Tensor l_gen;
    Tensor l_kd;
    std::size_t masked = 0;
  };

  // Builds the distillation terms whose weights are nonzero.
  Terms compute(const ForwardResult& student, const TeacherCache& cache, std::span<const std::size_t> indices,
                Rng& mask_rng) const;
  NamedTensors parameters() const;
  const DistillConfig& config() const { return cfg_; }
  std::size_t student_deep_layer() const { return student_deep_; }
  std::size_t teacher_deep_layer() const { return teacher_deep_; }

  bool mimic_active() const { return cfg_.alpha != 0.0 && !cfg_.shallow_layers.empty(); }
  bool gen_active() const { return cfg_.beta != 0.0; }
  bool kd_active() const { return cfg_.kd.enabled && cfg_.kd.weight != 0.0; }

 private:
  DistillConfig cfg_;
  std::size_t student_deep_ = 0, teacher_deep_ = 0;
  std::vector<LinearAdapter> shallow_adapters_;
  LinearAdapter deep_adapter_;
  std::unique_ptr<GenerativeBlock> generator_;
};

// Raises ConfigError when the two models tokenise images into different grids.
void require_matching_grid(const ViTConfig& student, const ViTConfig& teacher);

// Student training with L_ori + α·L_mimic + β·L_gen (+ KD). The teacher is
// only read. `cache`, when given, must hold the training images in order
// and cover the run's features; otherwise one is built here.
TrainResult distill_student(const VisionTransformer& teacher, const ViTConfig& student_cfg,
                            const DistillConfig& distill_cfg, const Dataset& train, const Dataset* test,
                            const TrainConfig& cfg, const RecordSink& sink = {},
                            const TeacherCache* cache = nullptr);

}  // namespace vitkd
