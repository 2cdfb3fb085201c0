#pragma once

// Meta-training over source tasks: episode sampling, one simulated inner
// step, meta-gradient estimation and the outer update. Also the multilingual
// joint-training and single-source transfer baselines, which share the same
// update budget and validation protocol.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fastadapt/learner.hpp"
#include "fastadapt/model.hpp"
#include "fastadapt/optim.hpp"
#include "fastadapt/params.hpp"
#include "fastadapt/tasks.hpp"

namespace fastadapt {

enum class Estimator { exact, hvp, first_order };
Estimator parse_estimator(const std::string& s);
const char* estimator_name(Estimator e);

struct MetaConfig {
  double meta_lr = 1e-3;  // outer step size
  double inner_lr = 1e-3;  // simulated inner step size
  std::size_t episodes_per_update = 1;
  Estimator estimator = Estimator::first_order;
  double nu = 1e-4;  // finite-difference step of the Hessian-vector product
  std::size_t total_updates = 1000;
  std::size_t d_tokens = 512;       // target tokens in the inner-step subset
  std::size_t dprime_tokens = 512;  // target tokens in the evaluation subset
  bool mean_over_episodes = false;  // default sums episode gradients
  OptimizerKind outer_optimizer = OptimizerKind::sgd;
  std::size_t eval_every = 50;  // outer steps between validation events
  bool dropout = true;
  std::size_t exact_parameter_limit = 20000;
  double divergence_loss = 1e3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Episode {
  std::size_t id = 0;
  std::size_t task = 0;  // index into the source task list
  Batch d;
  Batch dprime;
};

// Uniform index in [0, k).
std::size_t sample_task(std::size_t k, std::mt19937_64& rng);

// Uniform task choice, then two independent subsets of the task's train
// split drawn without replacement up to the token budgets. A split smaller
// than a budget is sampled with replacement, with a warning.
Episode sample_episode(const std::vector<const Task*>& tasks, std::mt19937_64& rng, const MetaConfig& cfg);

// Prefix of a shuffled train split reaching `budget` target tokens.
Batch sample_subset(const Batch& train, std::size_t budget, std::mt19937_64& rng, const std::string& task_name);

struct MetaGradient {
  GradMap grad;
  double inner_loss = 0.0;  // loss on D at theta
  double outer_loss = 0.0;  // loss on D' at the simulated theta'
};

// theta' = theta - eta * grad inner(theta); returns grad outer(theta').
MetaGradient meta_gradient_first_order(const ParamSet& theta, const Objective& inner, const Objective& outer,
                                       const NameSet& trainable, double eta);

// First-order term minus eta times a forward-difference Hessian-vector
// product of the inner loss along grad outer(theta'), step nu.
MetaGradient meta_gradient_hvp(const ParamSet& theta, const Objective& inner, const Objective& outer,
                               const NameSet& trainable, double eta, double nu);

// Differentiates outer(theta - eta * grad inner(theta)) through the inner
// step. Refuses sets with more than `parameter_limit` trainable values.
MetaGradient meta_gradient_exact(const ParamSet& theta, const Objective& inner, const Objective& outer,
                                 const NameSet& trainable, double eta, std::size_t parameter_limit);

MetaGradient meta_gradient(Estimator e, const ParamSet& theta, const Objective& inner, const Objective& outer,
                           const NameSet& trainable, double eta, double nu, std::size_t parameter_limit);

// Scores a parameter snapshot on the validation task; higher is better.
struct ValidationScore {
  double bleu = 0.0;
  double loss = 0.0;
};
using Validator = std::function<ValidationScore(const ParamSet&)>;

struct ValidationSetup {
  LearnConfig learn;               // fine-tune of the throwaway clone
  std::size_t train_tokens = 4000;  // low-resource budget of the validation task
  std::size_t max_sentences = 200;  // dev sentences decoded for BLEU
  std::uint64_t seed = 0;
};

// Fine-tunes a copy of the parameters on the validation task's low-resource
// split, then reports dev BLEU and dev loss.
Validator finetune_validator(const ModelContext& ctx, const Task& task, const ValidationSetup& setup);

struct MetaRecord {
  std::size_t update = 0;
  double train_loss = 0.0;  // mean episode loss (D' at theta' for meta, batch loss otherwise)
  double val_bleu = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct MetaResult {
  ParamSet params;  // snapshot with the best validation BLEU (final without a validator)
  std::vector<MetaRecord> log;
  std::size_t best_update = 0;
  double best_bleu = std::numeric_limits<double>::quiet_NaN();
};

// Called with each record as soon as it is complete.
using RecordSink = std::function<void(const MetaRecord&)>;

MetaResult meta_train(const ParamSet& theta_init, const ModelContext& ctx, const std::vector<const Task*>& sources,
                      const MetaConfig& cfg, const Validator& validator = {}, const RecordSink& sink = {});

// Joint maximum likelihood over the union of source tasks: per outer step,
// episodes_per_update batches of dprime_tokens from uniformly chosen tasks,
// gradients combined as in meta_train. Each update therefore applies
// gradients of as many target tokens as a meta update does.
MetaResult multilingual_train(const ParamSet& theta_init, const ModelContext& ctx,
                              const std::vector<const Task*>& sources, const MetaConfig& cfg,
                              const Validator& validator = {}, const RecordSink& sink = {});

MetaResult transfer_init(const ParamSet& theta_init, const ModelContext& ctx, const Task& source,
                         const MetaConfig& cfg, const Validator& validator = {}, const RecordSink& sink = {});

// ---- checkpoints --------------------------------------------------------

struct Checkpoint {
  ParamSet params;
  ModelContext context;
  std::string note;  // free text, e.g. the producing run's resolved config
};

// Binary container with a magic tag and version; written to a temporary
// file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Stable 64-bit hash of the model configuration (stored in checkpoints).
std::uint64_t config_hash(const ModelConfig& cfg);

}  // namespace fastadapt
