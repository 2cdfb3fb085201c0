#include "fastadapt/metalearn.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "fastadapt/bleu.hpp"

namespace fastadapt {

Estimator parse_estimator(const std::string& s) {
  if (s == "exact") return Estimator::exact;
  if (s == "hvp") return Estimator::hvp;
  if (s == "first_order") return Estimator::first_order;
  throw std::invalid_argument("unknown estimator '" + s + "' (expected exact|hvp|first_order)");
}

const char* estimator_name(Estimator e) {
  switch (e) {
    case Estimator::exact:
      return "exact";
    case Estimator::hvp:
      return "hvp";
    case Estimator::first_order:
      return "first_order";
  }
  return "?";
}

void MetaConfig::validate() const {
  if (!(meta_lr > 0.0)) throw std::invalid_argument("meta: meta_lr must be > 0");
  if (!(inner_lr > 0.0)) throw std::invalid_argument("meta: inner_lr must be > 0");
  if (episodes_per_update < 1) throw std::invalid_argument("meta: episodes_per_update must be >= 1");
  if (estimator == Estimator::hvp && !(nu > 0.0)) throw std::invalid_argument("meta: nu must be > 0");
  if (d_tokens < 1 || dprime_tokens < 1) throw std::invalid_argument("meta: token budgets must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("meta: eval_every must be >= 1");
  if (!(divergence_loss > 0.0)) throw std::invalid_argument("meta: divergence_loss must be > 0");
}

// ---- episodes -------------------------------------------------------------

Batch sample_subset(const Batch& train, std::size_t budget, std::mt19937_64& rng, const std::string& task_name) {
  if (train.empty()) throw std::invalid_argument("sample_subset: task " + task_name + " has no training pairs");
  Batch out;
  std::size_t tokens = 0;
  if (target_tokens(train) < budget) {
    std::clog << "warning: task " << task_name << " holds " << target_tokens(train) << " target tokens, below the "
              << budget << "-token budget; sampling with replacement\n";
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    while (tokens < budget) {
      out.push_back(train[pick(rng)]);
      tokens += target_tokens(out.back());
    }
    return out;
  }
  // Partial Fisher-Yates: uniform without replacement, stopped at the budget.
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; tokens < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
    out.push_back(train[order[i]]);
    tokens += target_tokens(out.back());
  }
  return out;
}

std::size_t sample_task(std::size_t k, std::mt19937_64& rng) {
  if (k == 0) throw std::invalid_argument("sample_task: no source tasks");
  return std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
}

Episode sample_episode(const std::vector<const Task*>& tasks, std::mt19937_64& rng, const MetaConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("sample_episode: no source tasks");
  Episode ep;
  ep.task = sample_task(tasks.size(), rng);
  const Task& t = *tasks[ep.task];
  ep.d = sample_subset(t.train, cfg.d_tokens, rng, t.name);
  ep.dprime = sample_subset(t.train, cfg.dprime_tokens, rng, t.name);
  return ep;
}

// ---- estimators -----------------------------------------------------------

namespace {

void require_finite(const GradMap& g, const char* what) {
  if (!all_finite(g)) throw NumericalError(std::string(what) + ": non-finite gradient");
}

}  // namespace

MetaGradient meta_gradient_first_order(const ParamSet& theta, const Objective& inner, const Objective& outer,
                                       const NameSet& trainable, double eta) {
  if (!(eta >= 0.0)) throw std::invalid_argument("meta_gradient: eta must be >= 0");
  ValueAndGrad gi = value_and_grad(inner, theta, trainable);
  require_finite(gi.grad, "meta_gradient_first_order");
  ParamSet simulated = add_scaled(theta, gi.grad, -eta);
  ValueAndGrad go = value_and_grad(outer, simulated, trainable);
  require_finite(go.grad, "meta_gradient_first_order");
  return {std::move(go.grad), gi.value, go.value};
}

MetaGradient meta_gradient_hvp(const ParamSet& theta, const Objective& inner, const Objective& outer,
                               const NameSet& trainable, double eta, double nu) {
  if (!(eta >= 0.0)) throw std::invalid_argument("meta_gradient: eta must be >= 0");
  if (!(nu > 0.0)) throw std::invalid_argument("meta_gradient_hvp: nu must be > 0");
  ValueAndGrad gi = value_and_grad(inner, theta, trainable);
  require_finite(gi.grad, "meta_gradient_hvp");
  ParamSet simulated = add_scaled(theta, gi.grad, -eta);
  ValueAndGrad go = value_and_grad(outer, simulated, trainable);
  require_finite(go.grad, "meta_gradient_hvp");
  ParamSet probe = add_scaled(theta, go.grad, nu);
  ValueAndGrad gp = value_and_grad(inner, probe, trainable);
  require_finite(gp.grad, "meta_gradient_hvp");
  GradMap out;
  double c = eta / nu;
  for (const auto& [name, g] : go.grad) {
    const Tensor& a = gp.grad.at(name);
    const Tensor& b = gi.grad.at(name);
    std::vector<double> v(g.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = g[i] - c * (a[i] - b[i]);
    out.emplace(name, Tensor(g.shape(), std::move(v)));
  }
  return {std::move(out), gi.value, go.value};
}

MetaGradient meta_gradient_exact(const ParamSet& theta, const Objective& inner, const Objective& outer,
                                 const NameSet& trainable, double eta, std::size_t parameter_limit) {
  if (!(eta >= 0.0)) throw std::invalid_argument("meta_gradient: eta must be >= 0");
  std::size_t count = theta.parameter_count(trainable);
  if (count > parameter_limit) {
    throw std::invalid_argument("meta_gradient_exact: " + std::to_string(count) + " trainable values exceed the limit " +
                                std::to_string(parameter_limit) + "; use the hvp or first_order estimator");
  }
  Graph g;
  VarMap vars = bind(g, theta, trainable);
  Var li = inner(g, vars);
  std::vector<Var> wrt;
  for (const auto& name : trainable) wrt.push_back(vars.at(name));
  std::vector<Var> grads = g.grad(li, wrt, true);
  VarMap stepped = vars;
  std::size_t k = 0;
  for (const auto& name : trainable) stepped[name] = sub(vars.at(name), scale(grads[k++], eta));
  Var lo = outer(g, stepped);
  MetaGradient out;
  out.inner_loss = li.value().item();
  out.outer_loss = lo.value().item();
  if (!std::isfinite(out.inner_loss) || !std::isfinite(out.outer_loss)) {
    throw NumericalError("meta_gradient_exact: non-finite loss");
  }
  out.grad = g.backward(lo);
  require_finite(out.grad, "meta_gradient_exact");
  return out;
}

MetaGradient meta_gradient(Estimator e, const ParamSet& theta, const Objective& inner, const Objective& outer,
                           const NameSet& trainable, double eta, double nu, std::size_t parameter_limit) {
  switch (e) {
    case Estimator::exact:
      return meta_gradient_exact(theta, inner, outer, trainable, eta, parameter_limit);
    case Estimator::hvp:
      return meta_gradient_hvp(theta, inner, outer, trainable, eta, nu);
    case Estimator::first_order:
      break;
  }
  return meta_gradient_first_order(theta, inner, outer, trainable, eta);
}

// ---- validation -----------------------------------------------------------

Validator finetune_validator(const ModelContext& ctx, const Task& task, const ValidationSetup& setup) {
  if (task.dev.empty()) throw std::invalid_argument("validator: task " + task.name + " has no dev split");
  auto train = std::make_shared<Batch>(subsample_by_tokens(task.train, setup.train_tokens, setup.seed));
  auto dev = std::make_shared<Batch>(task.dev);
  std::size_t n = std::min(setup.max_sentences, dev->size());
  auto sources = std::make_shared<std::vector<std::vector<int>>>();
  auto refs = std::make_shared<std::vector<std::vector<int>>>();
  for (std::size_t i = 0; i < n; ++i) {
    sources->push_back((*dev)[i].source);
    refs->push_back((*dev)[i].target);
  }
  return [&ctx, &task, setup, train, dev, sources, refs](const ParamSet& params) {
    LearnResult r = learn(params, ctx, task, *train, *dev, setup.learn);
    ValidationScore s;
    s.loss = corpus_loss(r.params, ctx, task.source, *dev);
    auto hyps = greedy_decode_batch(r.params, ctx, task.source, *sources, ctx.config.max_len);
    s.bleu = bleu(hyps, *refs);
    return s;
  };
}

// ---- outer loops ----------------------------------------------------------

namespace {

struct StepResult {
  GradMap grad;
  double loss = 0.0;
};

using StepFn = std::function<StepResult(const ParamSet&, std::mt19937_64&, std::size_t episode_id)>;

MetaResult outer_loop(const char* what, const ParamSet& theta_init, const MetaConfig& cfg, const Validator& validator,
                      const RecordSink& sink, const StepFn& episode_step) {
  using Clock = std::chrono::steady_clock;
  auto start = Clock::now();
  MetaResult res;
  res.params = theta_init;
  ParamSet params = theta_init;
  Optimizer opt(cfg.outer_optimizer, cfg.meta_lr);
  std::mt19937_64 rng(derive_seed(cfg.seed, "episodes"));

  auto emit = [&](MetaRecord rec) {
    rec.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    res.log.push_back(rec);
    if (sink) sink(rec);
  };
  auto validate_at = [&](std::size_t update, MetaRecord& rec) {
    if (!validator) return;
    ValidationScore s = validator(params);
    rec.val_bleu = s.bleu;
    rec.val_loss = s.loss;
    if (std::isnan(res.best_bleu) || s.bleu > res.best_bleu) {
      res.best_bleu = s.bleu;
      res.best_update = update;
      res.params = params;
    }
  };

  MetaRecord first;
  first.train_loss = std::numeric_limits<double>::quiet_NaN();
  validate_at(0, first);
  emit(first);

  std::size_t episode_id = 0;
  for (std::size_t update = 1; update <= cfg.total_updates; ++update) {
    GradMap total;
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < cfg.episodes_per_update; ++e) {
      StepResult s = episode_step(params, rng, episode_id++);
      loss_sum += s.loss;
      total = total.empty() ? std::move(s.grad) : add(total, s.grad);
    }
    if (cfg.mean_over_episodes) total = scaled(total, 1.0 / static_cast<double>(cfg.episodes_per_update));
    MetaRecord rec;
    rec.update = update;
    rec.train_loss = loss_sum / static_cast<double>(cfg.episodes_per_update);
    if (!(rec.train_loss <= cfg.divergence_loss)) {
      emit(rec);
      throw NumericalError(std::string(what) + ": diverged at update " + std::to_string(update) + " (loss " +
                           std::to_string(rec.train_loss) + ")");
    }
    opt.step(params, total);
    if (update % cfg.eval_every == 0 || update == cfg.total_updates) validate_at(update, rec);
    emit(rec);
  }
  if (!validator) {
    res.params = std::move(params);
    res.best_update = cfg.total_updates;
  }
  return res;
}

std::uint64_t episode_seed(std::uint64_t seed, std::size_t episode_id) {
  return derive_seed(seed, "dropout") + 0x9E3779B97F4A7C15ULL * episode_id;
}

}  // namespace

MetaResult meta_train(const ParamSet& theta_init, const ModelContext& ctx, const std::vector<const Task*>& sources,
                      const MetaConfig& cfg, const Validator& validator, const RecordSink& sink) {
  cfg.validate();
  if (sources.empty()) throw std::invalid_argument("meta_train: no source tasks");
  NameSet trainable = meta_trainable(theta_init);
  StepFn step = [&](const ParamSet& params, std::mt19937_64& rng, std::size_t id) {
    Episode ep = sample_episode(sources, rng, cfg);
    ep.id = id;
    const Task& t = *sources[ep.task];
    std::uint64_t seed = episode_seed(cfg.seed, id);
    Objective inner = loss_objective(ctx, t.source, std::move(ep.d), {cfg.dropout, seed});
    Objective outer = loss_objective(ctx, t.source, std::move(ep.dprime), {cfg.dropout, seed + 1});
    try {
      MetaGradient mg = meta_gradient(cfg.estimator, params, inner, outer, trainable, cfg.inner_lr, cfg.nu,
                                      cfg.exact_parameter_limit);
      return StepResult{std::move(mg.grad), mg.outer_loss};
    } catch (const NumericalError& e) {
      throw NumericalError("episode " + std::to_string(id) + " (task " + t.name + "): " + e.what());
    }
  };
  return outer_loop("meta_train", theta_init, cfg, validator, sink, step);
}

MetaResult multilingual_train(const ParamSet& theta_init, const ModelContext& ctx,
                              const std::vector<const Task*>& sources, const MetaConfig& cfg,
                              const Validator& validator, const RecordSink& sink) {
  cfg.validate();
  if (sources.empty()) throw std::invalid_argument("multilingual_train: no source tasks");
  NameSet trainable = meta_trainable(theta_init);
  StepFn step = [&](const ParamSet& params, std::mt19937_64& rng, std::size_t id) {
    const Task& t = *sources[sample_task(sources.size(), rng)];
    Batch batch = sample_subset(t.train, cfg.dprime_tokens, rng, t.name);
    Objective f = loss_objective(ctx, t.source, std::move(batch), {cfg.dropout, episode_seed(cfg.seed, id)});
    ValueAndGrad vg = value_and_grad(f, params, trainable);
    if (!all_finite(vg.grad)) {
      throw NumericalError("batch " + std::to_string(id) + " (task " + t.name + "): non-finite gradient");
    }
    return StepResult{std::move(vg.grad), vg.value};
  };
  return outer_loop("multilingual_train", theta_init, cfg, validator, sink, step);
}

MetaResult transfer_init(const ParamSet& theta_init, const ModelContext& ctx, const Task& source,
                         const MetaConfig& cfg, const Validator& validator, const RecordSink& sink) {
  return multilingual_train(theta_init, ctx, {&source}, cfg, validator, sink);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'A', 'D', 'A', 'P', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::string config_string(const ModelConfig& c) {
  auto num = [](double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
  };
  return "d_model=" + std::to_string(c.d_model) + ";n_layer=" + std::to_string(c.n_layer) +
         ";n_head=" + std::to_string(c.n_head) + ";d_ff=" + std::to_string(c.d_ff) +
         ";max_len=" + std::to_string(c.max_len) + ";dropout=" + num(c.dropout) + ";slots=" + std::to_string(c.slots) +
         ";tau=" + num(c.tau) + ";sign=" + similarity_sign_name(c.sign) +
         ";zero_output_layer=" + (c.zero_output_layer ? "1" : "0");
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <class T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    pod<std::uint64_t>(t.rank());
    for (std::size_t d : t.shape()) pod<std::uint64_t>(d);
    os_.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <class T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  std::string str() {
    auto n = pod<std::uint64_t>();
    if (n > (1ULL << 30)) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  Tensor tensor() {
    auto rank = pod<std::uint64_t>();
    if (rank > 8) fail("implausible tensor rank");
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(pod<std::uint64_t>());
    std::size_t n = shape_size(shape);
    if (n > (1ULL << 32)) fail("implausible tensor size");
    std::vector<double> data(n);
    is_.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    check();
    return Tensor(std::move(shape), std::move(data));
  }
  [[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("checkpoint " + path_ + ": " + msg); }

 private:
  void check() {
    if (!is_) fail("truncated file");
  }
  std::istream& is_;
  std::string path_;
};

}  // namespace

std::uint64_t config_hash(const ModelConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : config_string(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    Writer w(os);
    os.write(kMagic, sizeof kMagic);
    w.pod(kVersion);
    const ModelConfig& c = ckpt.context.config;
    w.pod<std::uint64_t>(config_hash(c));
    w.str(config_string(c));
    for (std::size_t v : {c.d_model, c.n_layer, c.n_head, c.d_ff, c.max_len, c.slots}) w.pod<std::uint64_t>(v);
    w.pod(c.dropout);
    w.pod(c.tau);
    w.pod<std::uint8_t>(c.sign == SimilaritySign::literal ? 1 : 0);
    w.pod<std::uint8_t>(c.zero_output_layer ? 1 : 0);
    w.pod<std::uint64_t>(ckpt.context.target_vocab);
    w.tensor(ckpt.context.ulr.eps_key);
    w.pod(ckpt.context.ulr.tau);
    w.pod<std::uint8_t>(ckpt.context.ulr.sign == SimilaritySign::literal ? 1 : 0);
    w.str(ckpt.note);
    w.pod<std::uint64_t>(ckpt.params.size());
    for (const auto& [name, e] : ckpt.params) {
      w.str(name);
      w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.partition));
      w.tensor(e.value);
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("not a checkpoint file");
  auto version = r.pod<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ck;
  auto hash = r.pod<std::uint64_t>();
  std::string described = r.str();
  ModelConfig& c = ck.context.config;
  std::size_t* fields[] = {&c.d_model, &c.n_layer, &c.n_head, &c.d_ff, &c.max_len, &c.slots};
  for (std::size_t* f : fields) *f = r.pod<std::uint64_t>();
  c.dropout = r.pod<double>();
  c.tau = r.pod<double>();
  c.sign = r.pod<std::uint8_t>() ? SimilaritySign::literal : SimilaritySign::similarity;
  c.zero_output_layer = r.pod<std::uint8_t>() != 0;
  if (config_hash(c) != hash || config_string(c) != described) r.fail("configuration hash mismatch");
  ck.context.target_vocab = r.pod<std::uint64_t>();
  ck.context.ulr.eps_key = r.tensor();
  ck.context.ulr.tau = r.pod<double>();
  ck.context.ulr.sign = r.pod<std::uint8_t>() ? SimilaritySign::literal : SimilaritySign::similarity;
  ck.note = r.str();
  auto n = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    auto part = r.pod<std::uint8_t>();
    if (part > 2) r.fail("bad partition for " + name);
    ck.params.add(name, r.tensor(), static_cast<Partition>(part));
  }
  if (is.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  c.validate();
  return ck;
}

}  // namespace fastadapt
