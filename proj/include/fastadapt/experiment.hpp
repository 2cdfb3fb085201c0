#pragma once

// Experiment orchestration: resolved configuration (key = value text),
// JSON-lines metrics, pretraining of the four initializations, fine-tuning
// and scoring, and the comparison grid with its summary table.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fastadapt/bleu.hpp"
#include "fastadapt/learner.hpp"
#include "fastadapt/metalearn.hpp"
#include "fastadapt/model.hpp"
#include "fastadapt/tasks.hpp"

namespace fastadapt {

enum class InitKind { random, transfer, multilingual, meta };
InitKind parse_init(const std::string& s);
const char* init_name(InitKind k);

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "FASTADAPT_OUT";

struct ExperimentConfig {
  std::string mode = "grid";
  std::filesystem::path family_dir = "family";
  std::filesystem::path output_dir;  // empty: $FASTADAPT_OUT, else "runs"
  std::filesystem::path checkpoint;  // finetune / evaluate input
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::size_t> budgets{16000};
  std::vector<FinetuneStrategy> strategies{FinetuneStrategy::all};
  std::vector<InitKind> inits{InitKind::random, InitKind::transfer, InitKind::multilingual, InitKind::meta};
  std::vector<std::string> sources;  // empty: every source language of the family
  std::vector<std::string> targets;  // empty: every target language
  std::string validation;            // empty: the family's validation language; "none" disables
  std::string transfer_source;       // empty: best single source per seed
  bool reuse_checkpoints = true;
  bool pretrain = true;  // false: a missing checkpoint is an error
  std::size_t test_sentences = 0;  // 0: whole test split
  BleuOptions bleu;

  ModelConfig model;
  MetaConfig meta;
  LearnConfig learn;
  ValidationSetup validation_setup;
  SyntheticFamilySpec family;

  ExperimentConfig();

  // Applies one key = value assignment; throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  static const std::string& describe(const std::string& key);

  // Every key, one "key = value" line each, in a fixed order.
  std::string serialize() const;
  // Blank lines and lines starting with '#' are skipped.
  void apply_text(const std::string& text, const std::string& origin = "config");
  void apply_file(const std::filesystem::path& path);

  std::filesystem::path resolved_output_dir() const;
  void validate() const;
};

struct MetricsRecord {
  std::string run;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string task;
  std::string split;
  double loss = 0.0;  // nan when not measured
  double bleu = 0.0;  // nan when not measured
  std::size_t budget = 0;
  double seconds = 0.0;

  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
};

// Append-only JSON-lines log; every record is flushed as it is written.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path);
  void append(const MetricsRecord& r);
  const std::vector<MetricsRecord>& records() const { return records_; }
  static std::vector<MetricsRecord> read(const std::filesystem::path& path);

 private:
  std::unique_ptr<std::ofstream> out_;
  std::vector<MetricsRecord> records_;
};

struct FinetuneOutcome {
  double test_bleu = 0.0;
  double dev_loss = 0.0;
  std::size_t steps = 0;
  ParamSet params;
};

// A loaded family plus the shared model context.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, MetricsLog* log = nullptr);

  const ExperimentConfig& config() const { return cfg_; }
  const Family& family() const { return family_; }
  const ModelContext& context() const { return context_; }
  std::vector<std::string> source_names() const;
  std::vector<std::string> target_names() const;
  std::optional<std::string> validation_name() const;

  // Freshly initialized parameters for `seed` (the random-init baseline).
  ParamSet initial(std::uint64_t seed) const;

  // Runs (or loads from the checkpoint cache) one pretraining.
  MetaResult pretrain(InitKind kind, const std::vector<std::string>& sources, std::uint64_t seed);
  std::filesystem::path checkpoint_path(InitKind kind, const std::vector<std::string>& sources,
                                        std::uint64_t seed) const;

  FinetuneOutcome finetune(const ParamSet& theta0, const std::string& target, std::size_t budget,
                           FinetuneStrategy strategy, std::uint64_t seed, const std::string& run);

  // Greedy decoding of the test split without any update.
  double zero_shot(const ParamSet& theta0, const std::string& target, std::uint64_t seed, const std::string& run);

  double test_bleu(const ParamSet& params, const std::string& target) const;

 private:
  void log(const MetricsRecord& r);

  ExperimentConfig cfg_;
  MetricsLog* log_;
  Family family_;
  ModelContext context_;
  std::vector<LanguageInfo> languages_;
};

// zero_shot_eval on a checkpoint: checks that the checkpoint matches the
// family's vocabulary sizes before decoding.
double zero_shot_eval(const Checkpoint& ckpt, const Task& target, std::size_t test_sentences = 0,
                      const BleuOptions& opts = {});

struct GridCell {
  InitKind init = InitKind::random;
  std::string target;
  std::size_t budget = 0;
  FinetuneStrategy strategy = FinetuneStrategy::all;
  std::vector<double> values;  // one test BLEU per seed, in seed order

  double mean() const;
  double stddev() const;  // sample standard deviation; 0 for a single value
};

struct GridSummary {
  std::vector<GridCell> cells;

  const GridCell& cell(InitKind init, const std::string& target, std::size_t budget,
                       FinetuneStrategy strategy) const;
  std::string csv() const;
  std::string table() const;
};

// For every seed, init, target, budget and strategy: fine-tune and score the
// test split. Writes config.txt, metrics.jsonl, summary.csv and summary.txt
// under the output directory.
GridSummary run_comparison_grid(const ExperimentConfig& cfg);

}  // namespace fastadapt
