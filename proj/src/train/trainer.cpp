#include "vitkd/trainer.hpp"

#include <cmath>
#include <numeric>

#include "json.hpp"

#include "vitkd/error.hpp"

namespace vitkd {

namespace {

// Stream tags for Rng::fork of the run seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kAugStream = 3;
constexpr std::uint64_t kDistillInitStream = 4;

std::size_t count_topk(const Tensor& logits, std::span<const int> labels, std::size_t k) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw ShapeError("label count does not match the logits batch");
  auto v = logits.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const float target = v[i * c + static_cast<std::size_t>(labels[i])];
    std::size_t above = 0;
    for (std::size_t j = 0; j < c; ++j) above += v[i * c + j] > target ? 1 : 0;
    hits += above < k ? 1 : 0;
  }
  return hits;
}

void hflip_inplace(Tensor& images, Rng& rng) {
  const std::size_t b = images.dim(0), s = images.dim(-1);
  auto px = images.data();
  for (std::size_t i = 0; i < b; ++i) {
    if (rng.uniform() >= 0.5f) continue;
    for (std::size_t row = 0; row < 3 * s; ++row) {
      float* r = px.data() + (i * 3 * s + row) * s;
      std::reverse(r, r + s);
    }
  }
}

struct DistillHooks {
  const VisionTransformer* teacher = nullptr;
  const Distiller* distiller = nullptr;
  const TeacherCache* cache = nullptr;  // over the whole training set
  TeacherCacheSpec spec;
};

NamedTensors snapshot(const NamedTensors& params) {
  NamedTensors out;
  for (const auto& [name, t] : params) out.emplace_back(name, t.detach());
  return out;
}

void restore(const NamedTensors& params, const NamedTensors& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = Tensor(params[i].second).data();
    auto src = saved[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

TrainResult run_training(std::unique_ptr<VisionTransformer> model, const Dataset& train, const Dataset* test,
                         const TrainConfig& cfg, const RecordSink& sink, const DistillHooks* hooks) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("training set is empty");
  if (train.num_classes != model->config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(train.num_classes) + " classes but the model predicts " +
                      std::to_string(model->config().num_classes));
  }
  Rng root(cfg.seed);
  Rng data_rng = root.fork(kDataStream);
  Rng mask_rng = root.fork(kMaskStream);
  Rng aug_rng = root.fork(kAugStream);

  const NamedTensors model_params = model->parameters();
  NamedTensors params = model_params;
  if (hooks != nullptr) {
    for (auto& p : hooks->distiller->parameters()) params.push_back(std::move(p));
  }
  AdamWOptions opt;
  opt.weight_decay = cfg.weight_decay;
  AdamW optimizer(params, opt);

  const std::size_t n = train.size();
  const std::size_t total = cfg.total_steps(n);
  const std::size_t warmup = cfg.resolved_warmup(total);
  const DistillConfig* dcfg = hooks ? &hooks->distiller->config() : nullptr;

  TrainResult result;
  std::vector<std::size_t> order(n);
  std::vector<std::size_t> local;
  std::optional<double> best_top1;
  NamedTensors best;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[data_rng.below(i + 1)]);

    for (std::size_t start = 0; start < n && step < total; start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      Tensor images = train.gather_images(idx);
      if (cfg.hflip) hflip_inplace(images, aug_rng);
      const std::vector<int> labels = train.gather_labels(idx);
      const double lr = cosine_lr(step, total, warmup, cfg.lr_max, cfg.lr_min);

      optimizer.zero_grad();
      const ForwardResult fr = model->forward(images);
      Tensor l_ori = cross_entropy(fr.logits, labels, static_cast<float>(cfg.label_smoothing));
      Tensor loss = l_ori;
      double l_mimic = 0.0, l_gen = 0.0, l_kd = 0.0;
      if (hooks != nullptr) {
        Distiller::Terms terms;
        if (cfg.hflip) {
          // Flipped images invalidate the cached features.
          TeacherCache online(*hooks->teacher, images, hooks->spec, images.dim(0));
          local.resize(idx.size());
          std::iota(local.begin(), local.end(), std::size_t{0});
          terms = hooks->distiller->compute(fr, online, local, mask_rng);
        } else {
          terms = hooks->distiller->compute(fr, *hooks->cache, idx, mask_rng);
        }
        if (terms.l_mimic.defined()) {
          l_mimic = terms.l_mimic.item();
          loss = add(loss, scale(terms.l_mimic, static_cast<float>(dcfg->alpha)));
        }
        if (terms.l_gen.defined()) {
          l_gen = terms.l_gen.item();
          loss = add(loss, scale(terms.l_gen, static_cast<float>(dcfg->beta)));
        }
        if (terms.l_kd.defined()) {
          l_kd = terms.l_kd.item();
          loss = add(loss, scale(terms.l_kd, static_cast<float>(dcfg->kd.weight)));
        }
      }

      TrainRecord rec;
      rec.step = step + 1;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.loss = dcfg ? loss_total(l_ori.item(), l_mimic, l_gen, l_kd, *dcfg)
                      : LossBreakdown{l_ori.item(), 0.0, 0.0, 0.0, l_ori.item()};
      rec.train_acc = 100.0 * static_cast<double>(count_topk(fr.logits, labels, 1)) / static_cast<double>(idx.size());
      if (!std::isfinite(rec.loss.total) || !std::isfinite(loss.item())) {
        Tape::current().clear();
        throw NumericError("non-finite loss at step " + std::to_string(rec.step) + " (l_ori " +
                           std::to_string(rec.loss.l_ori) + ", l_mimic " + std::to_string(l_mimic) + ", l_gen " +
                           std::to_string(l_gen) + ")");
      }
      backward(loss);
      optimizer.step(lr);
      ++step;

      const bool epoch_end = start + cfg.batch_size >= n;
      const bool due = cfg.eval_every > 0 ? step % cfg.eval_every == 0 : epoch_end;
      if (test != nullptr && (due || step == total)) {
        const EvalResult ev = evaluate(*model, *test);
        rec.top1 = ev.top1;
        rec.top5 = ev.top5;
        if (cfg.keep_best && (!best_top1 || ev.top1 > *best_top1)) {
          best_top1 = ev.top1;
          best = snapshot(model_params);
        }
      }
      if (sink) sink(rec);
      result.records.push_back(rec);
    }
  }
  if (cfg.keep_best && !best.empty()) restore(model_params, best);
  result.steps = step;
  result.final_eval = evaluate(*model, test != nullptr ? *test : train);
  result.model = std::move(model);
  return result;
}

}  // namespace

double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("topk_accuracy: expected [b×c] logits");
  if (labels.empty()) return 0.0;
  return 100.0 * static_cast<double>(count_topk(logits, labels, k)) / static_cast<double>(labels.size());
}

EvalResult evaluate(const VisionTransformer& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  EvalResult r;
  const std::size_t k5 = std::min<std::size_t>(5, model.config().num_classes);
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto fr = model.forward(data.gather_images(idx));
    const auto labels = data.gather_labels(idx);
    hit1 += count_topk(fr.logits, labels, 1);
    hit5 += count_topk(fr.logits, labels, k5);
  }
  r.samples = data.size();
  if (r.samples > 0) {
    r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(r.samples);
    r.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(r.samples);
  }
  return r;
}

std::string record_to_json(const TrainRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["l_ori"] = r.loss.l_ori;
  j["l_mimic"] = r.loss.l_mimic;
  j["l_gen"] = r.loss.l_gen;
  j["l_kd"] = r.loss.l_kd;
  j["total"] = r.loss.total;
  j["lr"] = r.lr;
  j["top1"] = r.top1 ? nlohmann::ordered_json(*r.top1) : nlohmann::ordered_json(nullptr);
  j["top5"] = r.top5 ? nlohmann::ordered_json(*r.top5) : nlohmann::ordered_json(nullptr);
  j["train_acc"] = r.train_acc;
  return j.dump();
}

TrainRecord record_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics line is not JSON: ") + e.what());
  }
  try {
    TrainRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.loss.l_ori = j.at("l_ori").get<double>();
    r.loss.l_mimic = j.at("l_mimic").get<double>();
    r.loss.l_gen = j.at("l_gen").get<double>();
    r.loss.l_kd = j.at("l_kd").get<double>();
    r.loss.total = j.at("total").get<double>();
    r.lr = j.at("lr").get<double>();
    if (!j.at("top1").is_null()) r.top1 = j["top1"].get<double>();
    if (!j.at("top5").is_null()) r.top5 = j["top5"].get<double>();
    if (j.contains("train_acc")) r.train_acc = j["train_acc"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics line is missing a field: ") + e.what());
  }
}

TrainResult train_supervised(const ViTConfig& model_cfg, const Dataset& train, const Dataset* test,
                             const TrainConfig& cfg, const RecordSink& sink) {
  return run_training(std::make_unique<VisionTransformer>(model_cfg), train, test, cfg, sink, nullptr);
}

TrainResult distill_student(const VisionTransformer& teacher, const ViTConfig& student_cfg,
                            const DistillConfig& distill_cfg, const Dataset& train, const Dataset* test,
                            const TrainConfig& cfg, const RecordSink& sink, const TeacherCache* cache) {
  const auto& tc = teacher.config();
  Rng init_rng = Rng(cfg.seed).fork(kDistillInitStream);
  Distiller distiller(student_cfg, tc, distill_cfg, init_rng);

  DistillHooks hooks;
  hooks.teacher = &teacher;
  hooks.distiller = &distiller;
  hooks.spec = TeacherCacheSpec::for_config(distill_cfg, tc.depth);
  std::unique_ptr<TeacherCache> own;
  if (!cfg.hflip) {
    if (cache == nullptr || !cache->covers(hooks.spec) || cache->size() != train.size()) {
      own = std::make_unique<TeacherCache>(teacher, train.images, hooks.spec);
      cache = own.get();
    }
    hooks.cache = cache;
  }
  return run_training(std::make_unique<VisionTransformer>(student_cfg), train, test, cfg, sink, &hooks);
}

}  // namespace vitkd
