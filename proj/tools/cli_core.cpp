#include "cli_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "vitkd/attn_export.hpp"
#include "vitkd/checkpoint.hpp"
#include "vitkd/error.hpp"
#include "vitkd/grad_audit.hpp"

namespace vitkd::cli {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Json vit_json(const ViTConfig& c) {
  return Json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"depth", c.depth},
              {"dim", c.dim},               {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
              {"num_classes", c.num_classes}, {"input_mean", c.input_mean}, {"input_std", c.input_std},
              {"seed", c.seed}};
}

Json train_json(const TrainConfig& t) {
  return Json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr_max", t.lr_max},
              {"lr_min", t.lr_min},
              {"warmup_steps", t.warmup_steps},
              {"weight_decay", t.weight_decay},
              {"seed", t.seed},
              {"eval_every", t.eval_every},
              {"label_smoothing", t.label_smoothing},
              {"hflip", t.hflip},
              {"keep_best", t.keep_best},
              {"max_steps", t.max_steps}};
}

ViTConfig vit_from(const Json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.input_mean = j.at("input_mean").get<std::array<float, 3>>();
  c.input_std = j.at("input_std").get<std::array<float, 3>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

TrainConfig train_from(const Json& j) {
  TrainConfig t;
  t.epochs = j.at("epochs").get<std::size_t>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.lr_max = j.at("lr_max").get<double>();
  t.lr_min = j.at("lr_min").get<double>();
  t.warmup_steps = j.at("warmup_steps").get<long>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.eval_every = j.at("eval_every").get<std::size_t>();
  t.label_smoothing = j.at("label_smoothing").get<double>();
  t.hflip = j.at("hflip").get<bool>();
  t.keep_best = j.at("keep_best").get<bool>();
  t.max_steps = j.at("max_steps").get<std::size_t>();
  t.validate();
  return t;
}

std::vector<bool> flags_from(const Json& j) {
  std::vector<bool> out;
  for (const auto& v : j) out.push_back(v.is_boolean() ? v.get<bool>() : v.get<int>() != 0);
  return out;
}

void merge_into(Json& dst, const Json& src, const std::string& path) {
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = dst[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
      merge_into(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory '" + out.string() + "'");
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  std::istringstream in(trim(text));
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError("cannot parse '" + text + "' in " + what);
  return v;
}

// Metrics stream that fails loudly when the disk does.
class MetricsFile {
 public:
  explicit MetricsFile(const fs::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
  }
  RecordSink sink() {
    return [this](const TrainRecord& r) {
      out_ << record_to_json(r) << '\n';
      out_.flush();
      if (!out_) throw IoError("failed writing '" + path_.string() + "'");
    };
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

// Prints a line every `every` steps and at evaluation points.
RecordSink progress(std::ostream& log, const std::string& tag, std::size_t every) {
  return [&log, tag, every](const TrainRecord& r) {
    if (r.step % every != 0 && !r.top1) return;
    log << tag << " step " << r.step << " epoch " << r.epoch << " loss " << fmt(r.loss.total, 4) << " (ori "
        << fmt(r.loss.l_ori, 4) << ", mimic " << fmt(r.loss.l_mimic, 2) << ", gen " << fmt(r.loss.l_gen, 2) << ")";
    if (r.top1) log << " top1 " << fmt(*r.top1) << " top5 " << fmt(*r.top5);
    log << '\n';
    log.flush();
  };
}

RecordSink both(RecordSink a, RecordSink b) {
  return [a = std::move(a), b = std::move(b)](const TrainRecord& r) {
    a(r);
    b(r);
  };
}

void write_eval(const fs::path& path, const EvalResult& e, const std::string& checkpoint) {
  Json j{{"top1", e.top1}, {"top5", e.top5}, {"samples", e.samples}, {"checkpoint", checkpoint}};
  write_text(path, j.dump(2) + "\n");
}

std::unique_ptr<VisionTransformer> load_model(const fs::path& path, const std::string& role) {
  if (!fs::exists(path)) throw IoError(role + " checkpoint not found: '" + path.string() + "'");
  return model_from_checkpoint(checkpoint_load(path));
}

}  // namespace

Json default_config() {
  auto teacher = ViTConfig::desk_teacher();
  teacher.seed = 100;
  auto student = ViTConfig::desk_student();
  student.seed = 1;
  TrainConfig student_train;
  student_train.epochs = 4;
  student_train.seed = 1;
  TrainConfig teacher_train;
  teacher_train.epochs = 6;
  teacher_train.seed = 100;
  const DistillConfig d;
  const DataSource data;
  const AblationSpec ab;
  Json j;
  j["out"] = "runs/vitkd";
  j["teacher_checkpoint"] = "";
  j["checkpoint"] = "";
  j["threads"] = 1;
  j["teacher"] = vit_json(teacher);
  j["student"] = vit_json(student);
  j["distill"] = Json{{"alpha", d.alpha},
                      {"beta", d.beta},
                      {"lambda", d.lambda},
                      {"shallow_layers", d.shallow_layers},
                      {"deep_layer", d.deep_layer},
                      {"mimic_method", to_string(d.mimic_method)},
                      {"gen_block", to_string(d.gen_block)},
                      {"tap_source", to_string(d.tap_source)},
                      {"deep_post_norm", d.deep_post_norm},
                      {"gen_depth", d.gen_depth},
                      {"cross_attn_ffn", d.cross_attn_ffn},
                      {"kd", Json{{"enabled", d.kd.enabled}, {"temperature", d.kd.temperature}, {"weight", d.kd.weight}}}};
  j["train"] = train_json(student_train);
  j["teacher_train"] = train_json(teacher_train);
  j["data"] = Json{{"source", data.kind},
                   {"train_seed", data.train_seed},
                   {"test_seed", data.test_seed},
                   {"train_per_class", data.train_per_class},
                   {"test_per_class", data.test_per_class},
                   {"classes", data.classes},
                   {"image_size", data.image_size},
                   {"train_images", ""},
                   {"train_labels", ""},
                   {"test_images", ""},
                   {"test_labels", ""}};
  j["ablate"] = Json{{"mimic", Json::array({0, 1})},
                     {"gen", Json::array({0, 1})},
                     {"shallow_sets", Json::array()},
                     {"alpha_mult", ab.alpha_mult},
                     {"beta_mult", ab.beta_mult},
                     {"seeds", ab.seeds}};
  j["attn"] = Json{{"layers", "all"}, {"samples", 64}};
  return j;
}

void set_dotted(Json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json* node = &root;
  for (const auto& part : split(key, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, set one of its fields");
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  if (node->is_number() && !value.is_number()) throw ConfigError("config key '" + key + "' expects a number");
  if (node->is_boolean() && !value.is_boolean()) throw ConfigError("config key '" + key + "' expects true or false");
  if (node->is_string() && !value.is_string()) value = text;
  *node = value;
}

Json resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  Json cfg = default_config();
  if (const char* env = std::getenv("VITKD_THREADS")) cfg["threads"] = parse_number<long>(env, "VITKD_THREADS");
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    Json file;
    try {
      file = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config file '" + path + "' must hold a JSON object");
    merge_into(cfg, file, "");
  }
  for (const auto& s : sets) set_dotted(cfg, s);
  return cfg;
}

RunConfig parse_run_config(const Json& j) {
  RunConfig c;
  c.raw = j;
  try {
    c.teacher = vit_from(j.at("teacher"));
    c.student = vit_from(j.at("student"));
    c.train = train_from(j.at("train"));
    c.teacher_train = train_from(j.at("teacher_train"));

    const auto& d = j.at("distill");
    c.distill.alpha = d.at("alpha").get<double>();
    c.distill.beta = d.at("beta").get<double>();
    c.distill.lambda = d.at("lambda").get<double>();
    c.distill.shallow_layers = d.at("shallow_layers").get<std::vector<std::size_t>>();
    c.distill.deep_layer = d.at("deep_layer").get<long>();
    c.distill.mimic_method = mimic_method_from_string(d.at("mimic_method").get<std::string>());
    c.distill.gen_block = gen_block_from_string(d.at("gen_block").get<std::string>());
    c.distill.tap_source = tap_source_from_string(d.at("tap_source").get<std::string>());
    c.distill.deep_post_norm = d.at("deep_post_norm").get<bool>();
    c.distill.gen_depth = d.at("gen_depth").get<std::size_t>();
    c.distill.cross_attn_ffn = d.at("cross_attn_ffn").get<bool>();
    c.distill.kd.enabled = d.at("kd").at("enabled").get<bool>();
    c.distill.kd.temperature = d.at("kd").at("temperature").get<double>();
    c.distill.kd.weight = d.at("kd").at("weight").get<double>();
    c.distill.validate(c.student.depth, c.teacher.depth);

    const auto& ds = j.at("data");
    c.data.kind = ds.at("source").get<std::string>();
    c.data.train_seed = ds.at("train_seed").get<std::uint64_t>();
    c.data.test_seed = ds.at("test_seed").get<std::uint64_t>();
    c.data.train_per_class = ds.at("train_per_class").get<std::size_t>();
    c.data.test_per_class = ds.at("test_per_class").get<std::size_t>();
    c.data.classes = ds.at("classes").get<std::size_t>();
    c.data.image_size = ds.at("image_size").get<std::size_t>();
    c.data.train_images = ds.at("train_images").get<std::string>();
    c.data.train_labels = ds.at("train_labels").get<std::string>();
    c.data.test_images = ds.at("test_images").get<std::string>();
    c.data.test_labels = ds.at("test_labels").get<std::string>();

    const auto& ab = j.at("ablate");
    c.ablate.mimic = flags_from(ab.at("mimic"));
    c.ablate.gen = flags_from(ab.at("gen"));
    c.ablate.shallow_sets = ab.at("shallow_sets").get<std::vector<std::vector<std::size_t>>>();
    c.ablate.alpha_mult = ab.at("alpha_mult").get<std::vector<double>>();
    c.ablate.beta_mult = ab.at("beta_mult").get<std::vector<double>>();
    c.ablate.seeds = ab.at("seeds").get<std::vector<std::uint64_t>>();

    c.out = j.at("out").get<std::string>();
    const auto tck = j.at("teacher_checkpoint").get<std::string>();
    c.teacher_checkpoint = tck.empty() ? c.out / "teacher.vkd1" : fs::path(tck);
    const long threads = j.at("threads").get<long>();
    if (threads < 1) throw ConfigError("threads (VITKD_THREADS) must be at least 1");
    c.threads = static_cast<std::size_t>(threads);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (c.data.kind != "synth" && c.data.kind != "idx") {
    throw ConfigError("data.source must be 'synth' or 'idx', got '" + c.data.kind + "'");
  }
  if (c.data.kind == "synth" && c.data.train_seed == c.data.test_seed) {
    throw ConfigError("data.train_seed and data.test_seed must differ so the splits are disjoint");
  }
  for (const auto* m : {&c.teacher, &c.student}) {
    if (m->image_size != c.data.image_size) {
      throw ConfigError("model image_size " + std::to_string(m->image_size) + " differs from data.image_size " +
                        std::to_string(c.data.image_size));
    }
    if (m->num_classes != c.data.classes) {
      throw ConfigError("model num_classes " + std::to_string(m->num_classes) + " differs from data.classes " +
                        std::to_string(c.data.classes));
    }
  }
  if (c.ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  if (c.ablate.mimic.empty() || c.ablate.gen.empty() || c.ablate.alpha_mult.empty() || c.ablate.beta_mult.empty()) {
    throw ConfigError("every ablation axis needs at least one value");
  }
  for (const auto& set : c.ablate.shallow_sets) {
    DistillConfig probe = c.distill;
    probe.shallow_layers = set;
    probe.validate(c.student.depth, c.teacher.depth);
  }
  for (double m : c.ablate.alpha_mult) {
    if (!(m >= 0.0)) throw ConfigError("ablate.alpha_mult entries must be non-negative");
  }
  for (double m : c.ablate.beta_mult) {
    if (!(m >= 0.0)) throw ConfigError("ablate.beta_mult entries must be non-negative");
  }
  return c;
}

AblationSpec parse_grid(const std::string& text, AblationSpec spec) {
  for (const auto& item : split(text, ';')) {
    if (trim(item).empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("grid entry '" + item + "' needs axis=values");
    const std::string axis = trim(item.substr(0, eq));
    const auto values = split(item.substr(eq + 1), axis == "layers" ? '|' : ',');
    if (values.empty()) throw ConfigError("grid axis '" + axis + "' has no values");
    auto flags = [&] {
      std::vector<bool> out;
      for (const auto& v : values) {
        const auto t = trim(v);
        if (t != "0" && t != "1") throw ConfigError("grid axis '" + axis + "' takes 0 or 1, got '" + t + "'");
        out.push_back(t == "1");
      }
      return out;
    };
    auto doubles = [&] {
      std::vector<double> out;
      for (const auto& v : values) out.push_back(parse_number<double>(v, "grid axis '" + axis + "'"));
      return out;
    };
    if (axis == "mimic") {
      spec.mimic = flags();
    } else if (axis == "gen") {
      spec.gen = flags();
    } else if (axis == "alpha_mult") {
      spec.alpha_mult = doubles();
    } else if (axis == "beta_mult") {
      spec.beta_mult = doubles();
    } else if (axis == "seeds") {
      spec.seeds.clear();
      for (const auto& v : values) spec.seeds.push_back(parse_number<std::uint64_t>(v, "grid axis 'seeds'"));
    } else if (axis == "layers") {
      spec.shallow_sets.clear();
      for (const auto& v : values) {
        std::vector<std::size_t> set;
        for (const auto& l : split(v, '+')) set.push_back(parse_number<std::size_t>(l, "grid axis 'layers'"));
        spec.shallow_sets.push_back(set);
      }
    } else {
      throw ConfigError("unknown grid axis '" + axis + "' (mimic, gen, layers, alpha_mult, beta_mult, seeds)");
    }
  }
  return spec;
}

Datasets load_datasets(const DataSource& src) {
  if (src.kind == "synth") {
    return {synth_generate(src.train_seed, src.train_per_class, src.classes, src.image_size, "train"),
            synth_generate(src.test_seed, src.test_per_class, src.classes, src.image_size, "test")};
  }
  for (const auto* p : {&src.train_images, &src.train_labels, &src.test_images, &src.test_labels}) {
    if (p->empty()) throw ConfigError("data.source 'idx' needs train/test image and label paths");
  }
  return {idx_load(src.train_images, src.train_labels, src.image_size, src.classes, "train"),
          idx_load(src.test_images, src.test_labels, src.image_size, src.classes, "test")};
}

std::vector<AblationCell> expand_grid(const AblationSpec& spec, const DistillConfig& base) {
  std::vector<std::vector<std::size_t>> sets = spec.shallow_sets;
  const bool vary_layers = !sets.empty();
  if (sets.empty()) sets.push_back(base.shallow_layers);
  std::vector<AblationCell> cells;
  std::map<std::string, bool> seen;
  for (const auto& set : sets) {
    for (bool mimic : spec.mimic) {
      for (bool gen : spec.gen) {
        for (double am : spec.alpha_mult) {
          for (double bm : spec.beta_mult) {
            AblationCell c;
            c.mimic = mimic;
            c.gen = gen;
            c.shallow = set;
            c.alpha_mult = mimic ? am : 0.0;
            c.beta_mult = gen ? bm : 0.0;
            c.config = base;
            c.config.shallow_layers = set;
            c.config.alpha = mimic ? base.alpha * am : 0.0;
            c.config.beta = gen ? base.beta * bm : 0.0;
            const char* mimic_name = base.mimic_method == MimicMethod::kLinear ? "L_lr" : "L_rm";
            std::string name = mimic && gen ? std::string(mimic_name) + "+L_gen"
                               : mimic     ? std::string(mimic_name)
                               : gen       ? std::string("L_gen")
                                           : std::string("baseline");
            if (mimic && spec.alpha_mult.size() > 1) name += " a*" + fmt(am, 3);
            if (gen && spec.beta_mult.size() > 1) name += " b*" + fmt(bm, 3);
            if (mimic && vary_layers) name += " [" + join(set, ",") + "]";
            if (seen[name]) continue;
            seen[name] = true;
            c.name = name;
            cells.push_back(c);
          }
        }
      }
    }
  }
  return cells;
}

OrderingCheck check_ordering(const AblationReport& report) {
  OrderingCheck o;
  auto find = [&](bool mimic, bool gen) -> long {
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
      const auto& c = report.cells[i];
      if (c.mimic != mimic || c.gen != gen) continue;
      if ((mimic && c.alpha_mult != 1.0) || (gen && c.beta_mult != 1.0)) continue;
      return static_cast<long>(i);
    }
    return -1;
  };
  const long b = find(false, false), l = find(true, false), g = find(false, true), lg = find(true, true);
  if (b < 0 || l < 0 || g < 0 || lg < 0) return o;
  o.available = true;
  o.baseline = report.cell_mean_top1[b];
  o.lr = report.cell_mean_top1[l];
  o.gen = report.cell_mean_top1[g];
  o.both = report.cell_mean_top1[lg];
  o.beats_lr = o.both >= o.lr;
  o.beats_gen = o.both >= o.gen;
  o.worst_gap = std::numeric_limits<double>::infinity();
  for (const auto& rb : report.runs) {
    if (rb.cell != static_cast<std::size_t>(b)) continue;
    for (const auto& rl : report.runs) {
      if (rl.cell == static_cast<std::size_t>(lg) && rl.seed == rb.seed) o.worst_gap = std::min(o.worst_gap, rl.top1 - rb.top1);
    }
  }
  o.within_baseline = o.worst_gap >= -0.5;
  return o;
}

std::string format_ablation_table(const AblationReport& r) {
  std::ostringstream os;
  std::size_t width = 8;
  for (const auto& c : r.cells) width = std::max(width, c.name.size());
  auto pad = [width](const std::string& s) { return s + std::string(width + 2 - s.size(), ' '); };
  os << "teacher top-1 " << fmt(r.teacher_top1) << "\n\n";
  os << pad("cell") << "alpha      beta       seed  top-1   top-5   seconds\n";
  for (const auto& run : r.runs) {
    const auto& c = r.cells[run.cell];
    char line[160];
    std::snprintf(line, sizeof line, "%-10.3g %-10.3g %-5llu %-7.2f %-7.2f %.0f\n", c.config.alpha, c.config.beta,
                  static_cast<unsigned long long>(run.seed), run.top1, run.top5, run.seconds);
    os << pad(c.name) << line;
  }
  os << "\n" << pad("cell") << "mean top-1  min     max\n";
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    double lo = 1e9, hi = -1e9;
    for (const auto& run : r.runs) {
      if (run.cell != i) continue;
      lo = std::min(lo, run.top1);
      hi = std::max(hi, run.top1);
    }
    char line[96];
    std::snprintf(line, sizeof line, "%-11.2f %-7.2f %.2f\n", r.cell_mean_top1[i], lo, hi);
    os << pad(r.cells[i].name) << line;
  }
  const auto& o = r.ordering;
  os << "\n";
  if (!o.available) {
    os << "ordering: not evaluated (grid lacks the baseline / single-loss / combined cells at unit weights)\n";
  } else {
    os << "ordering: mean(lr+gen) " << fmt(o.both) << " vs lr " << fmt(o.lr) << " vs gen " << fmt(o.gen)
       << " vs baseline " << fmt(o.baseline) << "\n";
    os << "ordering lr+gen >= lr:  " << (o.beats_lr ? "holds" : "VIOLATED") << "\n";
    os << "ordering lr+gen >= gen: " << (o.beats_gen ? "holds" : "VIOLATED") << "\n";
    os << "worst-seed lr+gen - baseline: " << fmt(o.worst_gap) << " (" << (o.within_baseline ? "within" : "OUTSIDE")
       << " the -0.5 point margin)\n";
    if (!o.beats_lr || !o.beats_gen) os << "FLAG: the combined-loss ordering does not hold on this grid\n";
  }
  os << "runtime: teacher " << fmt(r.teacher_seconds, 0) << " s, total " << fmt(r.total_seconds, 0) << " s\n";
  return os.str();
}

std::string format_ablation_csv(const AblationReport& r) {
  std::ostringstream os;
  os << "row,cell,mimic,gen,shallow_layers,alpha,beta,seed,top1,top5,seconds\n";
  for (const auto& run : r.runs) {
    const auto& c = r.cells[run.cell];
    os << "run," << c.name << ',' << c.mimic << ',' << c.gen << ',' << join(c.shallow, "+") << ',' << c.config.alpha
       << ',' << c.config.beta << ',' << run.seed << ',' << fmt(run.top1) << ',' << fmt(run.top5) << ','
       << fmt(run.seconds, 1) << '\n';
  }
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    const auto& c = r.cells[i];
    os << "mean," << c.name << ',' << c.mimic << ',' << c.gen << ',' << join(c.shallow, "+") << ',' << c.config.alpha
       << ',' << c.config.beta << ",," << fmt(r.cell_mean_top1[i]) << ",,\n";
  }
  return os.str();
}

AblationReport run_ablation(const RunConfig& cfg, std::ostream& log) {
  const auto t0 = Clock::now();
  AblationReport report;
  report.cells = expand_grid(cfg.ablate, cfg.distill);
  prepare_out(cfg.out);
  auto data = load_datasets(cfg.data);

  std::unique_ptr<VisionTransformer> teacher;
  if (fs::exists(cfg.teacher_checkpoint)) {
    log << "loading teacher from " << cfg.teacher_checkpoint.string() << "\n";
    teacher = load_model(cfg.teacher_checkpoint, "teacher");
    require_matching_grid(cfg.student, teacher->config());
  } else {
    log << "training teacher (" << cfg.teacher_train.epochs << " epochs)\n";
    MetricsFile metrics(cfg.out / "teacher_metrics.jsonl");
    auto r = train_teacher(cfg.teacher, data.train, &data.test, cfg.teacher_train,
                           both(metrics.sink(), progress(log, "teacher", 50)));
    checkpoint_save(model_checkpoint(*r.model), cfg.out / "teacher.vkd1");
    teacher = std::move(r.model);
  }
  report.teacher_top1 = evaluate(*teacher, data.test).top1;
  report.teacher_seconds = seconds_since(t0);
  log << "teacher top-1 " << fmt(report.teacher_top1) << " (" << fmt(report.teacher_seconds, 0) << " s)\n";

  std::unique_ptr<TeacherCache> cache;
  if (!cfg.train.hflip) {
    std::optional<TeacherCacheSpec> spec;
    for (const auto& c : report.cells) {
      auto s = TeacherCacheSpec::for_config(c.config, teacher->config().depth);
      spec = spec ? spec->merged(s) : s;
    }
    cache = std::make_unique<TeacherCache>(*teacher, data.train.images, *spec);
  }

  report.cell_mean_top1.assign(report.cells.size(), 0.0);
  for (std::size_t i = 0; i < report.cells.size(); ++i) {
    for (auto seed : cfg.ablate.seeds) {
      const auto r0 = Clock::now();
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      ViTConfig sc = cfg.student;
      sc.seed = seed;
      auto result = distill_student(*teacher, sc, report.cells[i].config, data.train, &data.test, tc, {}, cache.get());
      AblationRun run{i, seed, result.final_eval.top1, result.final_eval.top5, seconds_since(r0)};
      report.runs.push_back(run);
      report.cell_mean_top1[i] += run.top1 / static_cast<double>(cfg.ablate.seeds.size());
      log << report.cells[i].name << " seed " << seed << ": top-1 " << fmt(run.top1) << " (" << fmt(run.seconds, 0)
          << " s)\n";
      log.flush();
    }
  }
  report.ordering = check_ordering(report);
  report.total_seconds = seconds_since(t0);
  write_text(cfg.out / "ablation.txt", format_ablation_table(report));
  write_text(cfg.out / "ablation.csv", format_ablation_csv(report));
  return report;
}

AttnDumpResult attn_dump(const VisionTransformer& model, const Dataset& data, const std::vector<std::size_t>& layers,
                         std::size_t samples, const fs::path& out) {
  const auto& mc = model.config();
  for (auto l : layers) {
    if (l >= mc.depth) {
      throw ConfigError("attention layer " + std::to_string(l) + " does not exist (model depth " +
                        std::to_string(mc.depth) + ")");
    }
  }
  if (samples == 0) throw ConfigError("attn.samples must be at least 1");
  prepare_out(out);
  std::vector<std::size_t> idx(std::min(samples, data.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  NoGradGuard no_grad;
  const auto fr = model.forward(data.gather_images(idx));
  AttnDumpResult res;
  for (auto l : layers) {
    const Tensor avg = attention_average(attention_maps(fr.attention[l], l, mc.heads), l);
    const auto paths = attn_export(avg, (out / ("layer" + std::to_string(l))).string());
    res.layers.push_back(l);
    res.diagonal_mass.push_back(diagonal_mass(avg));
    res.files.push_back(paths.csv);
    res.files.push_back(paths.pgm);
  }
  return res;
}

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string layers;
  std::vector<std::string> grid;
};

RunConfig resolve(const Options& o, const std::string& command) {
  Json raw = resolve_config(o.config, o.sets);
  if (!o.out.empty()) raw["out"] = o.out;
  if (o.seed) {
    for (const char* sec : {"train", "teacher_train", "student", "teacher"}) raw[sec]["seed"] = *o.seed;
  }
  if (!o.checkpoint.empty()) raw["checkpoint"] = o.checkpoint;
  auto cfg = parse_run_config(raw);
  if (!o.grid.empty()) {
    std::string text;
    for (const auto& g : o.grid) text += g + ";";
    cfg.ablate = parse_grid(text, cfg.ablate);
  }
  prepare_out(cfg.out);
  Json echo = cfg.raw;
  if (!o.grid.empty()) {
    echo["ablate"]["mimic"] = cfg.ablate.mimic;
    echo["ablate"]["gen"] = cfg.ablate.gen;
    echo["ablate"]["shallow_sets"] = cfg.ablate.shallow_sets;
    echo["ablate"]["alpha_mult"] = cfg.ablate.alpha_mult;
    echo["ablate"]["beta_mult"] = cfg.ablate.beta_mult;
    echo["ablate"]["seeds"] = cfg.ablate.seeds;
  }
  cfg.raw = echo;
  write_text(cfg.out / "config.json", echo.dump(2) + "\n");
  std::cout << "command " << command << ", output in " << cfg.out.string() << "\n";
  return cfg;
}

int cmd_train_teacher(const RunConfig& cfg) {
  auto data = load_datasets(cfg.data);
  MetricsFile metrics(cfg.out / "metrics.jsonl");
  auto r = train_teacher(cfg.teacher, data.train, &data.test, cfg.teacher_train,
                         both(metrics.sink(), progress(std::cout, "teacher", 50)));
  const auto path = cfg.out / "teacher.vkd1";
  checkpoint_save(model_checkpoint(*r.model), path);
  write_eval(cfg.out / "eval.json", r.final_eval, path.string());
  std::cout << "teacher top-1 " << fmt(r.final_eval.top1) << " top-5 " << fmt(r.final_eval.top5) << ", saved "
            << path.string() << "\n";
  return kOk;
}

int cmd_distill(const RunConfig& cfg) {
  auto teacher = load_model(cfg.teacher_checkpoint, "teacher");
  require_matching_grid(cfg.student, teacher->config());
  auto data = load_datasets(cfg.data);
  MetricsFile metrics(cfg.out / "metrics.jsonl");
  const auto before = teacher->checksum();
  auto r = distill_student(*teacher, cfg.student, cfg.distill, data.train, &data.test, cfg.train,
                           both(metrics.sink(), progress(std::cout, "student", 50)));
  if (teacher->checksum() != before) throw NumericError("teacher parameters changed during distillation");
  const auto path = cfg.out / "student.vkd1";
  checkpoint_save(model_checkpoint(*r.model), path);
  write_eval(cfg.out / "eval.json", r.final_eval, path.string());
  if (!r.records.empty()) {
    const auto& first = r.records.front().loss;
    std::cout << "step 1: l_ori " << fmt(first.l_ori, 4) << " l_mimic " << fmt(first.l_mimic, 4) << " l_gen "
              << fmt(first.l_gen, 4) << " l_kd " << fmt(first.l_kd, 4) << "\n";
  }
  std::cout << "student top-1 " << fmt(r.final_eval.top1) << " top-5 " << fmt(r.final_eval.top5) << ", saved "
            << path.string() << "\n";
  return kOk;
}

int cmd_eval(const RunConfig& cfg) {
  const std::string ckpt = cfg.raw.at("checkpoint").get<std::string>();
  if (ckpt.empty()) throw ConfigError("eval needs --checkpoint PATH (or the 'checkpoint' config key)");
  auto model = load_model(ckpt, "model");
  auto data = load_datasets(cfg.data);
  const auto e = evaluate(*model, data.test);
  write_eval(cfg.out / "eval.json", e, ckpt);
  std::cout << "top-1 " << fmt(e.top1) << " top-5 " << fmt(e.top5) << " on " << e.samples << " samples\n";
  return kOk;
}

int cmd_ablate(const RunConfig& cfg) {
  auto report = run_ablation(cfg, std::cout);
  std::cout << "\n" << format_ablation_table(report);
  std::cout << "wrote " << (cfg.out / "ablation.txt").string() << " and " << (cfg.out / "ablation.csv").string()
            << "\n";
  return kOk;
}

std::vector<std::size_t> parse_layers(const std::string& text, std::size_t depth) {
  std::vector<std::size_t> out;
  if (text == "all") {
    for (std::size_t i = 0; i < depth; ++i) out.push_back(i);
    return out;
  }
  for (const auto& part : split(text, ',')) {
    const long l = parse_number<long>(part, "attention layers");
    if (l < 0 || static_cast<std::size_t>(l) >= depth) {
      throw ConfigError("attention layer " + trim(part) + " does not exist (model depth " + std::to_string(depth) +
                        ")");
    }
    out.push_back(static_cast<std::size_t>(l));
  }
  if (out.empty()) throw ConfigError("no attention layer requested");
  return out;
}

int cmd_attn_dump(const RunConfig& cfg, const Options& o) {
  std::string ckpt = cfg.raw.at("checkpoint").get<std::string>();
  if (ckpt.empty()) ckpt = cfg.teacher_checkpoint.string();
  auto model = load_model(ckpt, "model");
  std::string layer_text = o.layers;
  if (layer_text.empty()) {
    const auto& l = cfg.raw.at("attn").at("layers");
    if (l.is_string()) {
      layer_text = l.get<std::string>();
    } else {
      for (const auto& v : l) layer_text += (layer_text.empty() ? "" : ",") + v.dump();
    }
  }
  const auto layers = parse_layers(layer_text, model->config().depth);
  auto data = load_datasets(cfg.data);
  const auto samples = cfg.raw.at("attn").at("samples").get<std::size_t>();
  auto res = attn_dump(*model, data.test, layers, samples, cfg.out / "attn");
  Json summary{{"checkpoint", ckpt}, {"layers", res.layers}, {"diagonal_mass", res.diagonal_mass}};
  write_text(cfg.out / "attn" / "diagonal_mass.json", summary.dump(2) + "\n");
  for (std::size_t i = 0; i < res.layers.size(); ++i) {
    std::cout << "layer " << res.layers[i] << " diagonal mass " << fmt(res.diagonal_mass[i], 4) << "\n";
  }
  std::cout << "diagonal mass: [";
  for (std::size_t i = 0; i < res.diagonal_mass.size(); ++i) std::cout << (i ? ", " : "") << fmt(res.diagonal_mass[i], 4);
  std::cout << "]\nwrote " << res.files.size() << " files under " << (cfg.out / "attn").string() << "\n";
  return kOk;
}

int cmd_grad_check() {
  const auto t0 = Clock::now();
  const auto reports = run_grad_audit();
  bool ok = true;
  std::printf("%-18s %-12s %-34s %s\n", "target", "max rel err", "worst element", "status");
  for (const auto& r : reports) {
    const std::string where = r.worst_input + "[" + std::to_string(r.worst_index) + "]";
    std::printf("%-18s %-12.3e %-34s %s\n", r.target.c_str(), r.max_rel_error, where.c_str(), r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  std::printf("%zu targets, %.1f s, %s\n", reports.size(), seconds_since(t0), ok ? "all within 1e-3" : "FAILED");
  return ok ? kOk : kNumeric;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"ViTKD desk-scale distillation lab"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--config", o.config, "JSON config file");
  app.add_option("--set", o.sets, "override, KEY=VALUE with a dotted key (repeatable)")->allow_extra_args(false);
  app.add_option("--out", o.out, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "seed for training and model initialisation");

  auto* teacher = app.add_subcommand("train-teacher", "train the teacher with cross-entropy");
  auto* distill = app.add_subcommand("distill", "distil a student from the teacher checkpoint");
  auto* ablate = app.add_subcommand("ablate", "run a grid of distillation variants over several seeds");
  ablate->add_option("--grid", o.grid, "grid axes, e.g. \"mimic=0,1;gen=0,1;seeds=1,2,3\" (repeatable)");
  auto* attn = app.add_subcommand("attn-dump", "export averaged attention maps of a checkpoint");
  attn->add_option("--checkpoint", o.checkpoint, "model checkpoint (default: the teacher checkpoint)");
  attn->add_option("--layers", o.layers, "\"all\" or a comma list of layer indices");
  auto* grad = app.add_subcommand("grad-check", "finite-difference audit of losses and blocks");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (seed_opt->count() > 0) o.seed = seed;

  try {
    if (grad->parsed()) return cmd_grad_check();
    const std::string name = app.get_subcommands().front()->get_name();
    const auto cfg = resolve(o, name);
    if (teacher->parsed()) return cmd_train_teacher(cfg);
    if (distill->parsed()) return cmd_distill(cfg);
    if (ablate->parsed()) return cmd_ablate(cfg);
    if (attn->parsed()) return cmd_attn_dump(cfg, o);
    if (eval->parsed()) return cmd_eval(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DegenerateAttentionError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace vitkd::cli
