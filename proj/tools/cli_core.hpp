#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitkd/data.hpp"
#include "vitkd/distill_losses.hpp"
#include "vitkd/trainer.hpp"
#include "vitkd/vit.hpp"

namespace vitkd::cli {

using Json = nlohmann::ordered_json;

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

struct DataSource {
  std::string kind = "synth";  // synth | idx
  std::uint64_t train_seed = 1;
  std::uint64_t test_seed = 2;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t classes = 10;
  std::size_t image_size = 32;
  std::string train_images, train_labels, test_images, test_labels;
};

struct AblationSpec {
  std::vector<bool> mimic{false, true};
  std::vector<bool> gen{false, true};
  std::vector<std::vector<std::size_t>> shallow_sets;  // empty: the distill default only
  std::vector<double> alpha_mult{1.0};
  std::vector<double> beta_mult{1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct RunConfig {
  Json raw;  // fully resolved, echoed verbatim
  ViTConfig teacher;
  ViTConfig student;
  DistillConfig distill;
  TrainConfig train;
  TrainConfig teacher_train;
  DataSource data;
  AblationSpec ablate;
  std::filesystem::path out;
  std::filesystem::path teacher_checkpoint;
  std::size_t threads = 1;
};

// Every key the config file may set, with its default value.
Json default_config();

// Merges a config file (may be empty) over the defaults, then applies
// `--set key=value` overrides. Unknown keys are a ConfigError; a missing
// file is a ConfigError naming the path.
Json resolve_config(const std::string& path, const std::vector<std::string>& sets);
void set_dotted(Json& root, const std::string& assignment);

RunConfig parse_run_config(const Json& resolved);

// Ablation grid text: "mimic=0,1;gen=0,1;layers=0+1|0|2;alpha_mult=1,2;beta_mult=1;seeds=1,2,3".
AblationSpec parse_grid(const std::string& text, AblationSpec base);

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets load_datasets(const DataSource& src);

struct AblationCell {
  std::string name;
  bool mimic = false;
  bool gen = false;
  std::vector<std::size_t> shallow;
  double alpha_mult = 1.0;
  double beta_mult = 1.0;
  DistillConfig config;
};

struct AblationRun {
  std::size_t cell = 0;
  std::uint64_t seed = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  double seconds = 0.0;
};

struct OrderingCheck {
  bool available = false;  // the grid holds baseline, lr, gen and lr+gen at unit multipliers
  double baseline = 0, lr = 0, gen = 0, both = 0;
  bool beats_lr = false;
  bool beats_gen = false;
  bool within_baseline = false;  // lr+gen ≥ baseline − 0.5 on every seed
  double worst_gap = 0.0;        // min over seeds of (lr+gen − baseline)
};

struct AblationReport {
  std::vector<AblationCell> cells;
  std::vector<AblationRun> runs;
  std::vector<double> cell_mean_top1;
  OrderingCheck ordering;
  double teacher_top1 = 0.0;
  double teacher_seconds = 0.0;
  double total_seconds = 0.0;
};

std::vector<AblationCell> expand_grid(const AblationSpec& spec, const DistillConfig& base);

// Trains (or loads) the teacher, then every cell × seed. Writes
// ablation.txt, ablation.csv and teacher.vkd1 (when trained) under cfg.out.
AblationReport run_ablation(const RunConfig& cfg, std::ostream& log);
OrderingCheck check_ordering(const AblationReport& report);
std::string format_ablation_table(const AblationReport& report);
std::string format_ablation_csv(const AblationReport& report);

struct AttnDumpResult {
  std::vector<double> diagonal_mass;  // per dumped layer
  std::vector<std::size_t> layers;
  std::vector<std::filesystem::path> files;
};

// Averages attention over heads and the first `samples` test images for
// each requested layer and exports CSV + PGM under `out`.
AttnDumpResult attn_dump(const VisionTransformer& model, const Dataset& data, const std::vector<std::size_t>& layers,
                         std::size_t samples, const std::filesystem::path& out);

// Entry point; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace vitkd::cli
