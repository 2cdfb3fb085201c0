#include "fastadapt/learner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fastadapt {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void LearnConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("learn: max_steps must be >= 1");
  if (!(beta >= 0.0)) throw std::invalid_argument("learn: beta must be >= 0");
  if (!(inner_lr >= 0.0)) throw std::invalid_argument("learn: learning rate must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("learn: eval_every must be >= 1");
  if (batch_tokens < 1) throw std::invalid_argument("learn: batch_tokens must be >= 1");
}

Objective inner_objective(Objective loss, const ParamSet& theta0, double beta, const NameSet& trainable) {
  if (beta == 0.0) return loss;
  for (const auto& name : trainable) {
    if (!theta0.contains(name)) throw std::invalid_argument("inner_objective: theta0 has no parameter '" + name + "'");
  }
  return [loss = std::move(loss), theta0, beta, trainable](Graph& g, const VarMap& vars) {
    Var total = loss(g, vars);
    for (const auto& name : trainable) {
      auto it = vars.find(name);
      if (it == vars.end()) throw std::invalid_argument("inner_objective: parameters lack '" + name + "'");
      if (it->second.shape() != theta0.at(name).shape()) {
        throw ShapeError("inner_objective: '" + name + "' differs in shape from theta0");
      }
      Var diff = sub(it->second, g.constant(theta0.at(name)));
      total = add(total, scale(sum(mul(diff, diff)), beta));
    }
    return total;
  };
}

double inner_objective_value(const ParamSet& params, const ParamSet& theta0, const ModelContext& ctx,
                             const SourceSide& src, const Batch& batch, double beta, const NameSet& trainable) {
  if (!params.same_structure(theta0)) throw std::invalid_argument("inner_objective: params and theta0 differ in names/shapes");
  return evaluate(inner_objective(loss_objective(ctx, src, batch), theta0, beta, trainable), params);
}

LearnResult learn(const ParamSet& theta0, const LearnProblem& problem, const LearnConfig& cfg) {
  cfg.validate();
  if (!problem.train_objective) throw std::invalid_argument("learn: no training objective");
  LearnResult r;
  r.params = theta0;
  Optimizer opt(cfg.optimizer, cfg.inner_lr);
  bool stopping = problem.dev_loss && cfg.patience > 0;

  double best = std::numeric_limits<double>::infinity();
  ParamSet best_params = theta0;
  std::size_t since_best = 0;
  auto check_dev = [&](std::size_t step, LearnRecord& rec) {
    if (!problem.dev_loss) return false;
    rec.dev_loss = problem.dev_loss(r.params);
    if (!std::isfinite(rec.dev_loss)) throw NumericalError("learn: non-finite dev loss at step " + std::to_string(step));
    if (rec.dev_loss < best) {
      best = rec.dev_loss;
      best_params = r.params;
      r.best_step = step;
      since_best = 0;
      return false;
    }
    return stopping && ++since_best >= cfg.patience;
  };

  LearnRecord first{0, kNaN, kNaN};
  check_dev(0, first);
  r.history.push_back(first);

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    Objective f = inner_objective(problem.train_objective(step - 1), theta0, cfg.beta, problem.trainable);
    ValueAndGrad vg = value_and_grad(f, r.params, problem.trainable);
    if (!all_finite(vg.grad)) throw NumericalError("learn: non-finite gradient at step " + std::to_string(step));
    opt.step(r.params, vg.grad);
    r.steps = step;
    LearnRecord rec{step, vg.value, kNaN};
    bool stop = false;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) stop = check_dev(step, rec);
    r.history.push_back(rec);
    if (stop) {
      r.early_stopped = true;
      break;
    }
  }
  if (stopping) {
    r.params = best_params;
  } else {
    r.best_step = r.steps;
  }
  return r;
}

std::vector<Batch> make_batches(const Batch& data, std::size_t batch_tokens, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("make_batches: no data");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  Batch cur;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    cur.push_back(data[i]);
    tokens += target_tokens(data[i]);
    if (tokens >= batch_tokens) {
      out.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double corpus_loss(const ParamSet& params, const ModelContext& ctx, const SourceSide& src, const Batch& data,
                   std::size_t chunk_tokens) {
  if (data.empty()) throw std::invalid_argument("corpus_loss: no data");
  double total = 0.0;
  std::size_t tokens = 0;
  Batch chunk;
  std::size_t chunk_n = 0;
  auto flush = [&] {
    total += static_cast<double>(chunk_n) * log_likelihood(params, ctx, src, chunk);
    tokens += chunk_n;
    chunk.clear();
    chunk_n = 0;
  };
  for (const auto& p : data) {
    chunk.push_back(p);
    chunk_n += target_tokens(p);
    if (chunk_n >= chunk_tokens) flush();
  }
  if (!chunk.empty()) flush();
  return total / static_cast<double>(tokens);
}

LearnResult learn(const ParamSet& theta0, const ModelContext& ctx, const Task& task, const Batch& train,
                  const Batch& dev, const LearnConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("learn: empty training set for " + task.name);
  LearnProblem problem;
  problem.trainable = finetune_trainable(theta0, cfg.strategy, task.source.language);
  std::vector<Batch> epoch;
  std::size_t epoch_index = 0, cursor = 0;
  problem.train_objective = [&, cfg](std::size_t step) {
    if (cursor == epoch.size()) {
      epoch = make_batches(train, cfg.batch_tokens, cfg.seed * 1000003ULL + epoch_index++);
      cursor = 0;
    }
    ForwardOptions opts{cfg.dropout, cfg.seed * 7919ULL + step};
    return loss_objective(ctx, task.source, epoch[cursor++], opts);
  };
  if (!dev.empty()) {
    problem.dev_loss = [&](const ParamSet& p) { return corpus_loss(p, ctx, task.source, dev); };
  }
  return learn(theta0, problem, cfg);
}

ParamSet simulate_step(const ParamSet& theta, const Objective& f, const NameSet& trainable, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("simulate_step: eta must be > 0");
  ValueAndGrad vg = value_and_grad(f, theta, trainable);
  if (!all_finite(vg.grad)) throw NumericalError("simulate_step: non-finite gradient");
  return add_scaled(theta, vg.grad, -eta);
}

}  // namespace fastadapt
