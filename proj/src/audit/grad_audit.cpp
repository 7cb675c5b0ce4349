#include "vitkd/grad_audit.hpp"

#include "vitkd/distill_losses.hpp"
#include "vitkd/generative.hpp"
#include "vitkd/layers.hpp"
#include "vitkd/ops.hpp"
#include "vitkd/rng.hpp"

namespace vitkd {

namespace {

constexpr std::size_t kBatch = 2;
constexpr std::size_t kTokens = 4;
constexpr std::size_t kDim = 8;

Tensor uniform(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Trained-looking weights instead of the tiny init, so that every path
// carries a gradient of visible size.
void randomize(const NamedTensors& params, Rng& rng, float scale) {
  for (const auto& [name, t] : params) {
    Tensor h = t;
    for (auto& v : h.data()) v = rng.uniform(-scale, scale);
  }
}

std::vector<GradCheckInput> as_inputs(const NamedTensors& params) {
  std::vector<GradCheckInput> out;
  for (const auto& [name, t] : params) out.push_back({name, t});
  return out;
}

// Scalar probe of a [b×N×D] output: Σ out ⊙ R for a fixed random R.
Tensor probe(const Tensor& out, const Tensor& r) { return sum(mul(out, r)); }

MaskSpec fixed_mask() {
  MaskSpec m;
  m.lambda = 0.5;
  m.batch = kBatch;
  m.tokens = kTokens;
  m.mask = {1, 0, 1, 0, 0, 1, 1, 0};
  return m;
}

}  // namespace

std::vector<GradCheckReport> run_grad_audit(std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<GradCheckReport> reports;
  Rng rng(seed);
  const Shape feat{kBatch, kTokens, kDim};

  {
    FeatureMap fs{0, TapSource::kFfnOut, uniform({kBatch, kTokens, 6}, rng)};
    FeatureMap ft{0, TapSource::kFfnOut, uniform(feat, rng)};
    auto adapter = LinearAdapter::make(6, kDim, rng);
    NamedTensors p;
    adapter.fc.collect("fc", p);
    randomize(p, rng, 0.5f);
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"f_s", fs.tokens});
    reports.push_back(grad_check("L_lr", [&] { return loss_mimic_linear(fs, ft, adapter); }, inputs, options));
  }
  {
    FeatureMap fs{0, TapSource::kFfnOut, uniform({kBatch, kTokens, 6}, rng)};
    FeatureMap ft{0, TapSource::kFfnOut, uniform(feat, rng)};
    reports.push_back(grad_check("L_rm", [&] { return loss_mimic_corr(fs, ft); }, {{"f_s", fs.tokens}}, options));
  }
  {
    Tensor gen = uniform(feat, rng);
    FeatureMap ft{0, TapSource::kFfnOut, uniform(feat, rng)};
    const MaskSpec mask = fixed_mask();
    reports.push_back(grad_check("L_gen", [&] { return loss_generation(gen, ft, mask); }, {{"gen_out", gen}}, options));
  }
  {
    Tensor zs = uniform({kBatch, 5}, rng, -2.0f, 2.0f);
    Tensor zt = uniform({kBatch, 5}, rng, -2.0f, 2.0f);
    reports.push_back(grad_check("L_kd", [&] { return loss_kd_logit(zs, zt, 2.0); }, {{"z_s", zs}}, options));
  }
  {
    auto g = ConvProjector::make(kDim, kTokens, rng);
    NamedTensors p;
    g.collect("conv", p);
    randomize(p, rng, 0.5f);
    Tensor x = uniform(feat, rng);
    Tensor r = uniform(feat, rng);
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"x", x});
    reports.push_back(grad_check("G_conv", [&] { return probe(g(x), r); }, inputs, options));
  }
  {
    auto g = SelfAttnGenerator::make(kDim, kTokens, 2, 1, 2, rng);
    NamedTensors p;
    g.collect("self_attn", p);
    randomize(p, rng, 0.5f);
    Tensor x = uniform(feat, rng);
    Tensor r = uniform(feat, rng);
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"x", x});
    reports.push_back(grad_check("G_self_attn", [&] { return probe(g(x), r); }, inputs, options));
  }
  {
    auto g = CrossAttnGenerator::make(kDim, kTokens, 2, 1, 2, true, rng);
    NamedTensors p;
    g.collect("cross_attn", p);
    randomize(p, rng, 0.5f);
    Tensor x = uniform(feat, rng);
    Tensor r = uniform(feat, rng);
    const MaskSpec mask = fixed_mask();
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"x", x});
    reports.push_back(grad_check("G_cross_attn", [&] { return probe(g(x, mask), r); }, inputs, options));
  }
  {
    // Masked token -> conv generator -> L_gen, the full deep-layer path.
    GenerativeBlockConfig cfg;
    cfg.kind = GenBlockKind::kConv;
    cfg.dim = kDim;
    cfg.tokens = kTokens;
    GenerativeBlock block(cfg, rng);
    auto p = block.parameters();
    randomize(p, rng, 0.5f);
    Tensor fs = uniform(feat, rng);
    FeatureMap ft{0, TapSource::kFfnOut, uniform(feat, rng)};
    const MaskSpec mask = fixed_mask();
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"f_s", fs});
    reports.push_back(grad_check(
        "masked_generation",
        [&] { return loss_generation(block(apply_mask(fs, mask, block.masked_token()), mask), ft, mask); }, inputs,
        options));
  }
  {
    auto layer = EncoderLayer::make(kDim, 2, 2 * kDim, rng);
    NamedTensors p;
    layer.collect("encoder", p);
    randomize(p, rng, 0.5f);
    Tensor x = uniform(feat, rng);
    Tensor r = uniform(feat, rng);
    auto inputs = as_inputs(p);
    inputs.insert(inputs.begin(), {"x", x});
    reports.push_back(grad_check("encoder_layer", [&] { return probe(layer(x).y, r); }, inputs, options));
  }
  return reports;
}

}  // namespace vitkd
