#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vitkd/distill_losses.hpp"
#include "vitkd/grad_audit.hpp"

using namespace vitkd;
using vitkd::test::check_close;
using vitkd::test::random_tensor;

namespace {

FeatureMap fm(Tensor t) { return {0, TapSource::kFfnOut, std::move(t)}; }

bool close_rel(double a, double b, double tol = 1e-6) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

MaskSpec mask_of(std::size_t batch, std::size_t tokens, std::vector<std::uint8_t> bits) {
  MaskSpec m;
  m.batch = batch;
  m.tokens = tokens;
  m.mask = std::move(bits);
  return m;
}

}  // namespace

TEST_CASE("linear mimicking examples") {
  Rng rng(1);
  Tensor f = random_tensor({1, 2, 3}, rng);
  auto eye = LinearAdapter::identity(3);
  CHECK(loss_mimic_linear(fm(f), fm(f.clone()), eye).item() == 0.0f);

  Tensor ft = f.clone();
  for (auto& v : ft.data()) v += 1.0f;
  CHECK(loss_mimic_linear(fm(f), fm(ft), eye).item() == doctest::Approx(6.0));

  Tensor ft2 = f.clone();
  for (auto& v : ft2.data()) v += 2.0f;
  CHECK(loss_mimic_linear(fm(f), fm(ft2), eye).item() == doctest::Approx(24.0));
}

TEST_CASE("linear mimicking rejects different token grids") {
  Rng rng(2);
  auto adapter = LinearAdapter::make(4, 6, rng);
  CHECK_THROWS_AS(loss_mimic_linear(fm(Tensor::zeros({1, 4, 4})), fm(Tensor::zeros({1, 9, 6})), adapter), ShapeError);
}

TEST_CASE("correlation matrix examples") {
  const float r = 1.0f / std::sqrt(2.0f);
  check_close(correlation_matrix(Tensor({2, 2}, {1, 0, 0, 1})), {r, 0, 0, r});
  check_close(correlation_matrix(Tensor({2, 2}, {1, 0, 1, 0})), {r, r, r, r});
  check_close(correlation_matrix(Tensor::zeros({3, 5})), std::vector<float>(9, 0.0f));
  CHECK(correlation_matrix(Tensor::zeros({4, 7})).shape() == Shape{4, 4});
}

TEST_CASE("correlation mimicking examples") {
  Rng rng(3);
  Tensor a = random_tensor({2, 4, 6}, rng), b = random_tensor({2, 4, 9}, rng);
  CHECK(loss_mimic_corr(fm(a), fm(a.clone())).item() == 0.0f);
  Tensor eye({1, 2, 2}, {1, 0, 0, 1});
  CHECK(loss_mimic_corr(fm(Tensor::zeros({1, 2, 3})), fm(eye)).item() == doctest::Approx(1.0));
  CHECK(loss_mimic_corr(fm(a), fm(b)).item() == doctest::Approx(loss_mimic_corr(fm(b), fm(a)).item()));
}

TEST_CASE("correlation matrix is invariant under orthogonal right-rotation") {
  Rng rng(4);
  const std::size_t d = 6;
  // Random orthogonal Q by Gram-Schmidt.
  Tensor q = random_tensor({d, d}, rng);
  auto qd = q.data();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += qd[i * d + k] * qd[j * d + k];
      for (std::size_t k = 0; k < d; ++k) qd[i * d + k] -= static_cast<float>(dot) * qd[j * d + k];
    }
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += qd[i * d + k] * qd[i * d + k];
    for (std::size_t k = 0; k < d; ++k) qd[i * d + k] /= static_cast<float>(std::sqrt(norm));
  }
  Tensor f = random_tensor({5, d}, rng);
  check_close(correlation_matrix(matmul(f, q)), vitkd::test::values(correlation_matrix(f)), 1e-5);
}

TEST_CASE("losses match plain-loop oracles") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor fs = random_tensor({3, 4, 6}, rng), ft = random_tensor({3, 4, 8}, rng);
    auto adapter = LinearAdapter::make(6, 8, rng);
    for (auto& v : adapter.fc.weight.data()) v = rng.uniform(-1, 1);
    for (auto& v : adapter.fc.bias.data()) v = rng.uniform(-1, 1);
    CHECK(close_rel(loss_mimic_linear(fm(fs), fm(ft), adapter).item(),
                    oracle::mimic_linear(fs, ft, adapter.fc.weight, adapter.fc.bias)));
    CHECK(close_rel(loss_mimic_corr(fm(fs), fm(ft)).item(), oracle::mimic_corr(fs, ft), 1e-5));
    Tensor gen = random_tensor({3, 4, 8}, rng);
    auto mask = make_mask(3, 4, 0.5, rng);
    CHECK(close_rel(loss_generation(gen, fm(ft), mask).item(), oracle::generation(gen, ft, mask.mask)));
  }
}

TEST_CASE("mask examples") {
  Rng rng(6);
  auto none = make_mask(4, 16, 0.0, rng);
  CHECK(none.masked_count() == 0);
  auto all = make_mask(4, 16, 1.0, rng);
  CHECK(all.masked_count() == 64);
  auto half = make_mask(1, 10000, 0.5, rng);
  CHECK(half.masked_fraction() >= 0.48);
  CHECK(half.masked_fraction() <= 0.52);
  CHECK_THROWS_AS(make_mask(1, 4, 1.5, rng), ConfigError);
  CHECK_THROWS_AS(make_mask(1, 4, -0.1, rng), ConfigError);
}

TEST_CASE("apply_mask examples") {
  Rng rng(7);
  Tensor f = random_tensor({2, 3, 4}, rng);
  Tensor token = random_tensor({4}, rng);
  CHECK(vitkd::test::bitwise_equal(apply_mask(f, mask_of(2, 3, {0, 0, 0, 0, 0, 0}), token), f));
  Tensor all = apply_mask(f, mask_of(2, 3, {1, 1, 1, 1, 1, 1}), token);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(all.data()[r * 4 + j] == token.data()[j]);
  }
}

TEST_CASE("masked token receives gradient only when something is masked") {
  Rng rng(8);
  Tensor f = random_tensor({1, 3, 4}, rng);
  Tensor target = random_tensor({1, 3, 4}, rng);
  for (int masked : {0, 1}) {
    Tensor token = random_tensor({4}, rng).set_requires_grad(true);
    auto m = mask_of(1, 3, {0, std::uint8_t(masked), 0});
    auto full = mask_of(1, 3, {1, 1, 1});
    backward(loss_generation(apply_mask(f, m, token), fm(target), full));
    double norm = 0;
    for (auto g : token.grad()) norm += std::abs(g);
    if (masked) {
      CHECK(norm > 0.0);
    } else {
      CHECK(norm == 0.0);
    }
  }
}

TEST_CASE("generation loss examples") {
  Rng rng(9);
  Tensor gen = random_tensor({1, 2, 3}, rng);
  Tensor ft = random_tensor({1, 2, 3}, rng);
  CHECK(loss_generation(gen, fm(ft), mask_of(1, 2, {0, 0})).item() == 0.0f);

  Tensor g({1, 2, 3}, 0.0f);
  Tensor t({1, 2, 3}, {1, 1, 1, 5, 5, 5});
  CHECK(loss_generation(g, fm(t), mask_of(1, 2, {1, 0})).item() == doctest::Approx(3.0));

  // λ = 1 is the plain full-feature distance.
  auto adapter = LinearAdapter::identity(3);
  CHECK(close_rel(loss_generation(gen, fm(ft), mask_of(1, 2, {1, 1})).item(),
                  loss_mimic_linear(fm(gen), fm(ft), adapter).item()));
}

TEST_CASE("logit KD examples") {
  Tensor z({1, 2}, {0.3f, -1.2f});
  CHECK(loss_kd_logit(z, z.clone(), 1.0).item() == doctest::Approx(0.0).epsilon(1e-7));
  Tensor teacher({1, 2}, {std::log(2.0f), 0.0f});
  Tensor student({1, 2}, {0.0f, 0.0f});
  const double expected = 2.0 / 3.0 * std::log(4.0 / 3.0) + 1.0 / 3.0 * std::log(2.0 / 3.0);
  CHECK(loss_kd_logit(student, teacher, 1.0).item() == doctest::Approx(expected).epsilon(1e-5));
  CHECK(expected == doctest::Approx(0.0566).epsilon(1e-2));
  Rng rng(10);
  for (int i = 0; i < 20; ++i) {
    CHECK(loss_kd_logit(random_tensor({4, 5}, rng, -3, 3), random_tensor({4, 5}, rng, -3, 3), 2.0).item() >= 0.0f);
  }
}

TEST_CASE("loss_total examples") {
  DistillConfig cfg;
  cfg.alpha = 0;
  cfg.beta = 0;
  CHECK(loss_total(1.25, 100, 200, 3, cfg).total == 1.25);

  DistillConfig d;
  CHECK(d.alpha == 3e-5);
  CHECK(d.beta == 3e-6);
  CHECK(d.lambda == 0.5);
  auto b = loss_total(2.0, 1000.0, 1e6, 0.0, d);
  CHECK(b.total == doctest::Approx(5.03).epsilon(1e-12));

  DistillConfig twice = d;
  twice.alpha = 2 * d.alpha;
  CHECK(loss_total(2.0, 1000.0, 1e6, 0.0, twice).total - b.total == doctest::Approx(d.alpha * 1000.0));

  d.kd.enabled = true;
  d.kd.weight = 0.5;
  CHECK(loss_total(2.0, 1000.0, 1e6, 4.0, d).total == doctest::Approx(7.03));
}

TEST_CASE("teacher side never receives gradient") {
  Rng rng(11);
  Tensor fs = random_tensor({2, 4, 8}, rng).set_requires_grad(true);
  Tensor ft = random_tensor({2, 4, 8}, rng).set_requires_grad(true);
  auto adapter = LinearAdapter::make(8, 8, rng);
  auto m = make_mask(2, 4, 0.5, rng);
  Tensor zs = random_tensor({2, 5}, rng).set_requires_grad(true);
  Tensor zt = random_tensor({2, 5}, rng).set_requires_grad(true);
  backward(add(add(loss_mimic_linear(fm(fs), fm(ft), adapter), loss_mimic_corr(fm(fs), fm(ft))),
               add(loss_generation(fs, fm(ft), m), loss_kd_logit(zs, zt, 2.0))));
  CHECK(fs.has_grad());
  CHECK(zs.has_grad());
  auto zero = [](const Tensor& t) {
    for (auto g : t.grad()) {
      if (g != 0.0f) return false;
    }
    return true;
  };
  CHECK(zero(ft));
  CHECK(zero(zt));
}

TEST_CASE("gradient audit passes on every target") {
  auto reports = run_grad_audit();
  CHECK(reports.size() >= 6);
  for (const auto& r : reports) {
    INFO(r.target, ": ", r.max_rel_error, " at ", r.worst_input, "[", r.worst_index, "]");
    CHECK(r.passed);
    CHECK(r.elements_checked > 0);
  }
}

TEST_CASE("default configuration follows the shallow and deep prescription") {
  DistillConfig d;
  CHECK(d.shallow_layers == std::vector<std::size_t>{0, 1});
  CHECK(d.mimic_method == MimicMethod::kLinear);
  CHECK(d.tap_source == TapSource::kFfnOut);
  CHECK(d.gen_block == GenBlockKind::kConv);
  CHECK(d.deep_layer_for(4) == 3);
  CHECK(d.deep_layer_for(6) == 5);
  CHECK_FALSE(d.deep_post_norm);
  CHECK(d.gen_depth == 2);
  CHECK(d.cross_attn_ffn);
}

TEST_CASE("distill config validation") {
  DistillConfig d;
  d.validate(4, 6);
  DistillConfig bad = d;
  bad.alpha = -1;
  CHECK_THROWS_AS(bad.validate(4, 6), ConfigError);
  bad = d;
  bad.lambda = 2;
  CHECK_THROWS_AS(bad.validate(4, 6), ConfigError);
  bad = d;
  bad.shallow_layers = {0, 4};
  CHECK_THROWS_AS(bad.validate(4, 6), ConfigError);
  bad = d;
  bad.shallow_layers = {0, 3};
  CHECK_THROWS_AS(bad.validate(4, 6), ConfigError);
  CHECK(mimic_method_from_string("correlation") == MimicMethod::kCorrelation);
  CHECK(gen_block_from_string("cross_attn") == GenBlockKind::kCrossAttn);
  CHECK_THROWS_AS(gen_block_from_string("mlp"), ConfigError);
}
