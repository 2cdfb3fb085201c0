// Command-line front end. Every configuration key is also a flag
// (underscores become dashes); a --config file is applied first and flags
// override it. Exit codes: 0 success, 1 usage or bad input, 2 numerical
// failure (non-finite values, failed gradient check).

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

#include "fastadapt/experiment.hpp"
#include "fastadapt/gradcheck.hpp"

using namespace fastadapt;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> overrides;
};

void add_config_flags(Command& cmd) {
  cmd.app->add_option("--config", cmd.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  const ExperimentConfig defaults;
  for (const auto& key : ExperimentConfig::keys()) {
    if (key == "mode") continue;
    cmd.app->add_option_function<std::string>(
        flag_name(key), [&cmd, key](const std::string& v) { cmd.overrides[key] = v; },
        ExperimentConfig::describe(key) + " [" + defaults.get(key) + "]")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
}

ExperimentConfig resolve(const Command& cmd, const std::string& mode) {
  ExperimentConfig cfg;
  if (!cmd.config_file.empty()) cfg.apply_file(cmd.config_file);
  for (const auto& [k, v] : cmd.overrides) cfg.set(k, v);
  cfg.set("mode", mode);
  return cfg;
}

void write_config(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.txt") << cfg.serialize();
}

int run_generate(const ExperimentConfig& cfg) {
  FamilyManifest m = generate_family(cfg.family, cfg.family_dir);
  write_config(cfg, cfg.family_dir);
  std::cout << "generated " << m.languages.size() << " languages in " << cfg.family_dir.string() << "\n";
  return 0;
}

int run_pretrain(const ExperimentConfig& cfg, InitKind kind) {
  fs::path out = cfg.resolved_output_dir();
  write_config(cfg, out);
  MetricsLog log(out / "metrics.jsonl");
  Experiment ex(cfg, &log);
  std::vector<std::vector<std::string>> groups;
  if (kind == InitKind::transfer) {
    if (!cfg.transfer_source.empty()) {
      groups.push_back({cfg.transfer_source});
    } else {
      for (const auto& s : ex.source_names()) groups.push_back({s});
    }
  } else {
    groups.push_back(ex.source_names());
  }
  for (std::uint64_t seed : cfg.seeds) {
    for (const auto& g : groups) {
      MetaResult r = ex.pretrain(kind, g, seed);
      std::cout << init_name(kind) << " seed " << seed << ": " << ex.checkpoint_path(kind, g, seed).string();
      if (!r.log.empty() && r.best_bleu >= 0.0) {
        std::cout << " (best validation BLEU " << std::fixed << std::setprecision(2) << r.best_bleu << " at update "
                  << r.best_update << ")";
      }
      std::cout << "\n";
    }
  }
  return 0;
}

ParamSet starting_point(const Experiment& ex, const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.checkpoint.empty()) return ex.initial(seed);
  Checkpoint c = load_checkpoint(cfg.checkpoint);
  if (config_hash(c.context.config) != config_hash(ex.context().config) || !c.params.same_structure(ex.initial(seed))) {
    throw std::invalid_argument("checkpoint " + cfg.checkpoint.string() + " does not match the model configuration");
  }
  return c.params;
}

int run_finetune(const ExperimentConfig& cfg) {
  fs::path out = cfg.resolved_output_dir();
  write_config(cfg, out);
  MetricsLog log(out / "metrics.jsonl");
  Experiment ex(cfg, &log);
  std::string run = cfg.checkpoint.empty() ? "random" : cfg.checkpoint.stem().string();
  for (std::uint64_t seed : cfg.seeds) {
    ParamSet theta0 = starting_point(ex, cfg, seed);
    for (const auto& t : ex.target_names()) {
      for (std::size_t b : cfg.budgets) {
        for (FinetuneStrategy s : cfg.strategies) {
          FinetuneOutcome o = ex.finetune(theta0, t, b, s, seed, run);
          std::cout << t << " budget " << b << " " << strategy_name(s) << " seed " << seed << ": BLEU " << std::fixed
                    << std::setprecision(2) << o.test_bleu << " after " << o.steps << " steps\n";
        }
      }
    }
  }
  return 0;
}

int run_evaluate(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw std::invalid_argument("evaluate needs --checkpoint");
  Checkpoint c = load_checkpoint(cfg.checkpoint);
  Family fam = load_family(cfg.family_dir, c.context.config.max_len);
  std::vector<std::string> targets = cfg.targets.empty() ? fam.manifest.names(LanguageRole::target) : cfg.targets;
  for (const auto& t : targets) {
    double b = zero_shot_eval(c, fam.task(t), cfg.test_sentences, cfg.bleu);
    std::cout << t << " zero-shot BLEU " << std::fixed << std::setprecision(2) << b << "\n";
  }
  return 0;
}

int run_grid(const ExperimentConfig& cfg) {
  GridSummary s = run_comparison_grid(cfg);
  std::cout << s.table();
  return 0;
}

int run_gradcheck(const ExperimentConfig& cfg, std::size_t sentences, double step, double tolerance) {
  Family fam = load_family(cfg.family_dir, cfg.model.max_len);
  auto sources = cfg.sources.empty() ? fam.manifest.names(LanguageRole::source) : cfg.sources;
  if (sources.empty()) throw std::invalid_argument("gradcheck: the family has no source language");
  const Task& task = fam.task(sources.front());
  ModelInit m = init_model(cfg.model, fam.pivot_query, fam.target_vocab->size(), fam.languages(),
                           derive_seed(cfg.seeds.front(), "init"));
  Batch batch(task.train.begin(), task.train.begin() + std::min(sentences, task.train.size()));
  GradCheckReport r = grad_check(loss_objective(m.context, task.source, batch), m.params, step, tolerance,
                                 meta_trainable(m.params));
  std::cout << "checked " << r.entries.size() << " tensors (" << m.params.parameter_count(meta_trainable(m.params))
            << " parameters): max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error
            << " in " << r.worst_parameter << "\n";
  if (!r.passed) {
    for (const auto& n : r.failed_parameters()) std::cerr << "gradient mismatch: " << n << "\n";
    return kNumerical;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning for low-resource translation: data generation, pretraining, fine-tuning, grids"};
  app.require_subcommand(1);
  const std::vector<std::pair<std::string, std::string>> subs{
      {"generate", "write a synthetic language family"},
      {"metatrain", "meta-learn an initialization on the source languages"},
      {"multitrain", "multilingual pretraining on the source languages"},
      {"transfer", "single-source pretraining (one per source unless --transfer-source)"},
      {"finetune", "fine-tune a checkpoint (or a random init) on the target languages"},
      {"evaluate", "zero-shot BLEU of a checkpoint on the target languages"},
      {"grid", "full comparison grid with summary table"},
      {"gradcheck", "compare analytic and finite-difference gradients of the configured model"},
  };
  std::vector<Command> cmds(subs.size());
  std::size_t gc_sentences = 2;
  double gc_step = 1e-5, gc_tolerance = 1e-4;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    cmds[i].app = app.add_subcommand(subs[i].first, subs[i].second);
    add_config_flags(cmds[i]);
  }
  CLI::App* gc = cmds.back().app;
  gc->add_option("--sentences", gc_sentences, "sentences in the checked batch")->capture_default_str();
  gc->add_option("--step", gc_step, "central-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tolerance, "largest accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!cmds[i].app->parsed()) continue;
      const std::string& mode = subs[i].first;
      ExperimentConfig cfg = resolve(cmds[i], mode);
      if (mode == "generate") return run_generate(cfg);
      cfg.validate();
      if (mode == "metatrain") return run_pretrain(cfg, InitKind::meta);
      if (mode == "multitrain") return run_pretrain(cfg, InitKind::multilingual);
      if (mode == "transfer") return run_pretrain(cfg, InitKind::transfer);
      if (mode == "finetune") return run_finetune(cfg);
      if (mode == "evaluate") return run_evaluate(cfg);
      if (mode == "grid") return run_grid(cfg);
      if (mode == "gradcheck") return run_gradcheck(cfg, gc_sentences, gc_step, gc_tolerance);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
