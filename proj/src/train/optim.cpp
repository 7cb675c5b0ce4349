#include <cmath>
#include <numbers>

#include "vitkd/error.hpp"
#include "vitkd/trainer.hpp"

namespace vitkd {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (!(lr_min >= 0.0) || !(lr_max >= lr_min)) throw ConfigError("need 0 <= train.lr_min <= train.lr_max");
  if (warmup_steps < -1) throw ConfigError("train.warmup_steps must be >= 0 (or -1 for 5% of the steps)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("train.label_smoothing must lie in [0, 1)");
  }
}

std::size_t TrainConfig::steps_per_epoch(std::size_t n_train) const { return (n_train + batch_size - 1) / batch_size; }

std::size_t TrainConfig::total_steps(std::size_t n_train) const {
  const std::size_t full = epochs * steps_per_epoch(n_train);
  return max_steps > 0 ? std::min(full, max_steps) : full;
}

std::size_t TrainConfig::resolved_warmup(std::size_t total) const {
  if (warmup_steps >= 0) return static_cast<std::size_t>(warmup_steps);
  return static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(total)));
}

void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                std::size_t t, double lr, const AdamWOptions& opt) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ContractError("adamw_step: parameter, gradient and state sizes differ");
  }
  if (t == 0) throw ContractError("adamw_step: step count is 1-based");
  const float decay = static_cast<float>(1.0 - lr * opt.weight_decay);
  const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(opt.beta1, static_cast<double>(t))));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(opt.beta2, static_cast<double>(t))));
  const float step = static_cast<float>(lr), eps = static_cast<float>(opt.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    m[i] = b1 * m[i] + (1.0f - b1) * g;
    v[i] = b2 * v[i] + (1.0f - b2) * g * g;
    const float m_hat = m[i] * c1;
    const float v_hat = v[i] * c2;
    param[i] = param[i] * decay - step * m_hat / (std::sqrt(v_hat) + eps);
  }
}

AdamW::AdamW(NamedTensors params, AdamWOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0f);
    v_.emplace_back(t.numel(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  std::vector<float> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    AdamWOptions opt = options_;
    if (p.rank() < 2) opt.weight_decay = 0.0;
    std::span<const float> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), 0.0f);
      g = zeros;
    }
    adamw_step(p.data(), g, m_[i], v_[i], t_, lr, opt);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double lr_max, double lr_min) {
  if (warmup > 0 && step < warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  const std::size_t last = total > 0 ? total - 1 : 0;
  if (last <= warmup) return lr_max;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(last - warmup));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double cosine_lr(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  return cosine_lr(step, total, cfg.resolved_warmup(total), cfg.lr_max, cfg.lr_min);
}

}  // namespace vitkd
