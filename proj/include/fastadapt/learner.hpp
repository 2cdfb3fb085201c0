#pragma once

// Language-specific learning: gradient steps from an initialization on one
// task, with an optional proximity penalty and dev-loss early stopping.

#include <cstdint>
#include <functional>
#include <vector>

#include "fastadapt/model.hpp"
#include "fastadapt/optim.hpp"
#include "fastadapt/params.hpp"
#include "fastadapt/tasks.hpp"

namespace fastadapt {

struct LearnConfig {
  double beta = 0.0;  // weight of ||theta - theta0||^2
  double inner_lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t max_steps = 200;
  std::size_t patience = 5;  // dev evaluations without improvement; 0 disables early stopping
  std::size_t eval_every = 10;
  std::size_t batch_tokens = 512;
  FinetuneStrategy strategy = FinetuneStrategy::all;
  bool dropout = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LearnRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // loss of the batch used for the step (nan at step 0)
  double dev_loss = 0.0;    // nan when not evaluated
};

struct LearnResult {
  ParamSet params;
  std::vector<LearnRecord> history;
  std::size_t steps = 0;       // optimizer steps taken
  std::size_t best_step = 0;   // step of the returned snapshot
  bool early_stopped = false;
};

// Generic learning problem: a per-step training objective, an optional dev
// loss for early stopping, and the names that may change.
struct LearnProblem {
  std::function<Objective(std::size_t step)> train_objective;
  std::function<double(const ParamSet&)> dev_loss;
  NameSet trainable;
};

// Adds beta * sum over `trainable` of ||theta - theta0||^2 to `loss`.
// beta = 0 returns `loss` itself.
Objective inner_objective(Objective loss, const ParamSet& theta0, double beta, const NameSet& trainable);

double inner_objective_value(const ParamSet& params, const ParamSet& theta0, const ModelContext& ctx,
                             const SourceSide& src, const Batch& batch, double beta, const NameSet& trainable);

LearnResult learn(const ParamSet& theta0, const LearnProblem& problem, const LearnConfig& cfg);

// Fine-tunes on a task's train pairs with the strategy's trainable set.
// An empty dev set means plain max_steps stopping.
LearnResult learn(const ParamSet& theta0, const ModelContext& ctx, const Task& task, const Batch& train,
                  const Batch& dev, const LearnConfig& cfg);

// One plain gradient step theta - eta * grad over `trainable`.
ParamSet simulate_step(const ParamSet& theta, const Objective& f, const NameSet& trainable, double eta);

// Shuffled partition into batches of at least `batch_tokens` target tokens
// (eos included); the last batch may be smaller.
std::vector<Batch> make_batches(const Batch& data, std::size_t batch_tokens, std::uint64_t seed);

// Mean per-token loss over a possibly large set, evaluated in chunks.
double corpus_loss(const ParamSet& params, const ModelContext& ctx, const SourceSide& src, const Batch& data,
                   std::size_t chunk_tokens = 4096);

}  // namespace fastadapt
