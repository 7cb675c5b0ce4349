#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "vitkd/trainer.hpp"

using namespace vitkd;

namespace {

ViTConfig small_model(std::uint64_t seed = 1) {
  ViTConfig c = ViTConfig::desk_student();
  c.depth = 3;
  c.seed = seed;
  return c;
}

ViTConfig small_teacher() {
  ViTConfig c = ViTConfig::desk_teacher();
  c.depth = 3;
  c.seed = 99;
  return c;
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 16;
  t.max_steps = steps;
  t.seed = 5;
  return t;
}

void check_same_records(const std::vector<TrainRecord>& a, const std::vector<TrainRecord>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].loss.l_ori == b[i].loss.l_ori);
    CHECK(a[i].loss.total == b[i].loss.total);
    CHECK(a[i].lr == b[i].lr);
    CHECK(a[i].train_acc == b[i].train_acc);
    CHECK(a[i].top1 == b[i].top1);
  }
}

}  // namespace

TEST_CASE("AdamW examples") {
  AdamWOptions opt;
  opt.weight_decay = 0.0;
  std::vector<float> p{1.5f, -2.0f}, g{0, 0}, m{0, 0}, v{0, 0};
  adamw_step(p, g, m, v, 1, 0.1, opt);
  CHECK(p == std::vector<float>{1.5f, -2.0f});

  opt.weight_decay = 0.1;
  adamw_step(p, g, m, v, 2, 0.1, opt);
  CHECK(p[0] == doctest::Approx(0.99 * 1.5));
  CHECK(p[1] == doctest::Approx(0.99 * -2.0));

  AdamWOptions plain;
  plain.weight_decay = 0.0;
  plain.eps = 1e-12;
  std::vector<float> q{0.0f}, gq{1.0f}, mq{0}, vq{0};
  adamw_step(q, gq, mq, vq, 1, 0.1, plain);
  CHECK(q[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("AdamW skips decay on vectors") {
  Tensor w = Tensor::ones({2, 2}).set_requires_grad(true);
  Tensor b = Tensor::ones({2}).set_requires_grad(true);
  AdamW opt({{"w", w}, {"b", b}}, AdamWOptions{});
  opt.step(0.1);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 0.05));
  CHECK(b.data()[0] == 1.0f);
}

TEST_CASE("cosine schedule examples") {
  const std::size_t total = 101, warmup = 21;
  CHECK(cosine_lr(0, total, warmup, 1e-3, 1e-5) == 0.0);
  CHECK(cosine_lr(10, total, warmup, 1e-3, 1e-5) == doctest::Approx(1e-3 * 10 / 21.0));
  CHECK(cosine_lr(warmup, total, warmup, 1e-3, 1e-5) == doctest::Approx(1e-3));
  CHECK(cosine_lr(total - 1, total, warmup, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(cosine_lr(warmup + 40, total, warmup, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2));
  for (std::size_t s = warmup; s + 1 < total; ++s) {
    CHECK(cosine_lr(s + 1, total, warmup, 1e-3, 1e-5) <= cosine_lr(s, total, warmup, 1e-3, 1e-5));
  }
}

TEST_CASE("train config resolves and validates") {
  TrainConfig t;
  CHECK(t.resolved_warmup(200) == 10);
  t.warmup_steps = 3;
  CHECK(t.resolved_warmup(200) == 3);
  CHECK(t.steps_per_epoch(65) == 2);
  t.epochs = 3;
  CHECK(t.total_steps(65) == 6);
  t.max_steps = 4;
  CHECK(t.total_steps(65) == 4);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr_min = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.warmup_steps = -2;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("top-k accuracy") {
  Tensor logits({3, 4}, {0.1f, 0.9f, 0.3f, 0.2f, 5, 1, 2, 3, 1, 1, 1, 1});
  std::vector<int> labels{1, 3, 2};
  CHECK(topk_accuracy(logits, labels, 1) == doctest::Approx(100.0 * 2 / 3));
  CHECK(topk_accuracy(logits, labels, 2) == doctest::Approx(100.0));
}

TEST_CASE("overfitting 64 samples reaches 100% in 200 steps") {
  std::vector<std::size_t> first(64);
  std::iota(first.begin(), first.end(), 0);
  auto data = synth_generate(3, 7, 10, 32).subset(first);
  REQUIRE(data.size() == 64);
  TrainConfig t;
  t.epochs = 200;
  t.batch_size = 64;
  t.lr_max = 3e-3;
  t.weight_decay = 0.0;
  t.label_smoothing = 0.0;
  t.eval_every = 200;
  auto model = small_model();
  model.depth = 2;
  auto r = train_teacher(model, data, &data, t);
  REQUIRE(r.records.size() == 200);
  CHECK(r.records.back().loss.l_ori < r.records.front().loss.l_ori);
  CHECK(r.final_eval.top1 == 100.0);
  CHECK(r.records.back().train_acc == 100.0);
}

TEST_CASE("an untrained model is at chance on random labels") {
  auto data = synth_generate(4, 100, 10, 32);
  Rng rng(8);
  for (auto& y : data.labels) y = static_cast<int>(rng.below(10));
  VisionTransformer model(small_model(3));
  auto e = evaluate(model, data);
  CHECK(e.samples == 1000);
  CHECK(e.top1 >= 7.0);
  CHECK(e.top1 <= 13.0);
  CHECK(e.top5 >= e.top1);
}

TEST_CASE("training is deterministic and logs consistent records") {
  auto train = synth_generate(5, 8, 10, 32);
  auto test = synth_generate(6, 2, 10, 32, "test");
  auto t = short_run(6);
  t.eval_every = 3;
  auto a = train_supervised(small_model(), train, &test, t);
  auto b = train_supervised(small_model(), train, &test, t);
  check_same_records(a.records, b.records);
  CHECK(a.model->checksum() == b.model->checksum());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].step == i + 1);
    CHECK(a.records[i].top1.has_value() == ((i + 1) % 3 == 0 || i + 1 == a.records.size()));
    if (a.records[i].top1) CHECK(*a.records[i].top5 >= *a.records[i].top1);
  }
}

TEST_CASE("metrics records round-trip through JSON") {
  TrainRecord r;
  r.step = 12;
  r.epoch = 2;
  r.loss = {2.302585092994046, 364.1234567, 518.000001, 0.0566, 2.3149};
  r.lr = 9.87654321e-4;
  r.train_acc = 43.75;
  r.top1 = 51.2;
  r.top5 = 93.0;
  const auto line = record_to_json(r);
  CHECK(line.find("\"step\":12") != std::string::npos);
  auto back = record_from_json(line);
  CHECK(back.loss.l_mimic == r.loss.l_mimic);
  CHECK(back.loss.total == r.loss.total);
  CHECK(back.lr == r.lr);
  CHECK(back.top1 == r.top1);
  CHECK(record_to_json(back) == line);
  r.top1.reset();
  r.top5.reset();
  CHECK_FALSE(record_from_json(record_to_json(r)).top1.has_value());
  CHECK_THROWS_AS(record_from_json("{\"step\": 1"), FormatError);
}

TEST_CASE("distillation with zero weights reduces to baseline training") {
  auto train = synth_generate(5, 8, 10, 32);
  VisionTransformer teacher(small_teacher());
  auto t = short_run(5);
  DistillConfig off;
  off.alpha = 0;
  off.beta = 0;
  auto d = distill_student(teacher, small_model(), off, train, nullptr, t);
  auto base = train_supervised(small_model(), train, nullptr, t);
  check_same_records(d.records, base.records);
  CHECK(d.model->checksum() == base.model->checksum());
  for (const auto& r : d.records) {
    CHECK(r.loss.l_mimic == 0.0);
    CHECK(r.loss.l_gen == 0.0);
  }
}

TEST_CASE("default distillation: positive terms, frozen teacher, consistent totals") {
  auto train = synth_generate(5, 8, 10, 32);
  VisionTransformer teacher(small_teacher());
  const auto before = teacher.checksum();
  auto t = short_run(4);
  DistillConfig cfg;
  cfg.shallow_layers = {0, 1};
  auto d = distill_student(teacher, small_model(), cfg, train, nullptr, t);
  CHECK(teacher.checksum() == before);
  for (const auto& [name, p] : teacher.parameters()) CHECK_FALSE(p.has_grad());
  REQUIRE(!d.records.empty());
  CHECK(d.records[0].loss.l_mimic > 0.0);
  CHECK(d.records[0].loss.l_gen > 0.0);
  for (const auto& r : d.records) {
    const double recomposed = r.loss.l_ori + cfg.alpha * r.loss.l_mimic + cfg.beta * r.loss.l_gen;
    CHECK(std::abs(r.loss.total - recomposed) <= 1e-6);
  }
}

TEST_CASE("every generator and mimic variant trains") {
  auto train = synth_generate(5, 4, 10, 32);
  VisionTransformer teacher(small_teacher());
  for (auto kind : {GenBlockKind::kConv, GenBlockKind::kSelfAttn, GenBlockKind::kCrossAttn}) {
    DistillConfig cfg;
    cfg.gen_block = kind;
    cfg.mimic_method = kind == GenBlockKind::kConv ? MimicMethod::kCorrelation : MimicMethod::kLinear;
    cfg.tap_source = kind == GenBlockKind::kSelfAttn ? TapSource::kMhaOut : TapSource::kFfnOut;
    cfg.kd.enabled = kind == GenBlockKind::kCrossAttn;
    auto d = distill_student(teacher, small_model(), cfg, train, nullptr, short_run(2));
    CHECK(d.records.size() == 2);
    CHECK(std::isfinite(d.records.back().loss.total));
    if (cfg.kd.enabled) CHECK(d.records[0].loss.l_kd > 0.0);
  }
}

TEST_CASE("mismatched patch grids are a configuration error") {
  auto train = synth_generate(5, 2, 10, 32);
  auto tc = small_teacher();
  tc.patch_size = 8;
  VisionTransformer teacher(tc);
  CHECK_THROWS_AS(distill_student(teacher, small_model(), DistillConfig{}, train, nullptr, short_run(1)), ConfigError);
  CHECK_THROWS_AS(require_matching_grid(small_model(), tc), ConfigError);
}

TEST_CASE("a supplied teacher cache gives the same run as an internal one") {
  auto train = synth_generate(5, 4, 10, 32);
  VisionTransformer teacher(small_teacher());
  DistillConfig cfg;
  auto spec = TeacherCacheSpec::for_config(cfg, teacher.config().depth);
  TeacherCache cache(teacher, train.images, spec);
  CHECK(cache.size() == 40);
  CHECK(cache.tokens() == 64);
  CHECK(cache.dim() == 64);
  auto a = distill_student(teacher, small_model(), cfg, train, nullptr, short_run(3), {}, &cache);
  auto b = distill_student(teacher, small_model(), cfg, train, nullptr, short_run(3));
  check_same_records(a.records, b.records);
}
