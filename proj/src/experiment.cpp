#include "fastadapt/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fastadapt {

namespace fs = std::filesystem;

InitKind parse_init(const std::string& s) {
  if (s == "random") return InitKind::random;
  if (s == "transfer") return InitKind::transfer;
  if (s == "multilingual") return InitKind::multilingual;
  if (s == "meta") return InitKind::meta;
  throw std::invalid_argument("unknown init '" + s + "' (expected random|transfer|multilingual|meta)");
}

const char* init_name(InitKind k) {
  switch (k) {
    case InitKind::random:
      return "random";
    case InitKind::transfer:
      return "transfer";
    case InitKind::multilingual:
      return "multilingual";
    case InitKind::meta:
      return "meta";
  }
  return "?";
}

// ---- key = value configuration -------------------------------------------

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

std::string fmt(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw std::invalid_argument(key + ": not a number: '" + v + "'");
  return x;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw std::invalid_argument(key + ": not a non-negative integer: '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected true|false, got '" + v + "'");
}

const std::vector<std::string> kModes{"generate", "metatrain", "multitrain", "transfer", "finetune",
                                      "evaluate", "grid",      "gradcheck"};

struct Field {
  std::string key;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define FA_SIZE(KEY, MEMBER, HELP)                                                                    \
  Field {                                                                                             \
    KEY, HELP, [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); },                    \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = static_cast<std::size_t>(to_uint(KEY, v)); } \
  }
#define FA_REAL(KEY, MEMBER, HELP)                                                                      \
  Field {                                                                                               \
    KEY, HELP, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                                 \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); }                 \
  }
#define FA_BOOL(KEY, MEMBER, HELP)                                                                      \
  Field {                                                                                               \
    KEY, HELP, [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); },      \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); }                   \
  }
#define FA_STR(KEY, MEMBER, HELP)                                                                       \
  Field {                                                                                               \
    KEY, HELP, [](const ExperimentConfig& c) { return std::string(c.MEMBER); },                         \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = v; }                                 \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      Field{"mode", "generate|metatrain|multitrain|transfer|finetune|evaluate|grid|gradcheck",
            [](const ExperimentConfig& c) { return c.mode; },
            [](ExperimentConfig& c, const std::string& v) {
              if (std::find(kModes.begin(), kModes.end(), v) == kModes.end()) {
                throw std::invalid_argument("mode: unknown mode '" + v + "'");
              }
              c.mode = v;
            }},
      Field{"family_dir", "synthetic family or corpus directory", [](const ExperimentConfig& c) { return c.family_dir.string(); },
            [](ExperimentConfig& c, const std::string& v) { c.family_dir = v; }},
      Field{"output_dir", "output root (default: $FASTADAPT_OUT, else runs)",
            [](const ExperimentConfig& c) { return c.output_dir.string(); },
            [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
      Field{"checkpoint", "input checkpoint for finetune/evaluate", [](const ExperimentConfig& c) { return c.checkpoint.string(); },
            [](ExperimentConfig& c, const std::string& v) { c.checkpoint = v; }},
      Field{"seeds", "comma-separated run seeds",
            [](const ExperimentConfig& c) {
              return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
            },
            [](ExperimentConfig& c, const std::string& v) {
              c.seeds.clear();
              for (const auto& s : split_list(v)) c.seeds.push_back(to_uint("seeds", s));
            }},
      Field{"budgets", "comma-separated target-side token budgets",
            [](const ExperimentConfig& c) {
              return join<std::size_t>(c.budgets, [](const std::size_t& s) { return std::to_string(s); });
            },
            [](ExperimentConfig& c, const std::string& v) {
              c.budgets.clear();
              for (const auto& s : split_list(v)) c.budgets.push_back(static_cast<std::size_t>(to_uint("budgets", s)));
            }},
      Field{"strategies", "comma-separated fine-tuning strategies: all|emb+enc|emb",
            [](const ExperimentConfig& c) {
              return join<FinetuneStrategy>(c.strategies, [](const FinetuneStrategy& s) { return std::string(strategy_name(s)); });
            },
            [](ExperimentConfig& c, const std::string& v) {
              c.strategies.clear();
              for (const auto& s : split_list(v)) c.strategies.push_back(parse_strategy(s));
            }},
      Field{"inits", "comma-separated initializations: random|transfer|multilingual|meta",
            [](const ExperimentConfig& c) {
              return join<InitKind>(c.inits, [](const InitKind& k) { return std::string(init_name(k)); });
            },
            [](ExperimentConfig& c, const std::string& v) {
              c.inits.clear();
              for (const auto& s : split_list(v)) c.inits.push_back(parse_init(s));
            }},
      Field{"sources", "comma-separated source languages (empty: all)",
            [](const ExperimentConfig& c) { return join<std::string>(c.sources, [](const std::string& s) { return s; }); },
            [](ExperimentConfig& c, const std::string& v) { c.sources = split_list(v); }},
      Field{"targets", "comma-separated target languages (empty: all)",
            [](const ExperimentConfig& c) { return join<std::string>(c.targets, [](const std::string& s) { return s; }); },
            [](ExperimentConfig& c, const std::string& v) { c.targets = split_list(v); }},
      FA_STR("validation", validation, "validation language (empty: the family's; none: off)"),
      FA_STR("transfer_source", transfer_source, "single transfer source (empty: best per seed)"),
      FA_BOOL("reuse_checkpoints", reuse_checkpoints, "load cached pretraining checkpoints"),
      FA_BOOL("pretrain", pretrain, "pretrain when a checkpoint is missing"),
      FA_SIZE("test_sentences", test_sentences, "test sentences scored (0: all)"),
      FA_SIZE("bleu_max_n", bleu.max_n, "largest BLEU n-gram order"),
      FA_BOOL("bleu_smoothing", bleu.smoothing, "add-one smoothing for n >= 2"),

      Field{"d_model", "model width (also the generated embedding dimension)",
            [](const ExperimentConfig& c) { return std::to_string(c.model.d_model); },
            [](ExperimentConfig& c, const std::string& v) {
              c.model.d_model = static_cast<std::size_t>(to_uint("d_model", v));
              c.family.dim = c.model.d_model;
            }},
      FA_SIZE("n_layer", model.n_layer, "encoder and decoder layers"),
      FA_SIZE("n_head", model.n_head, "attention heads"),
      FA_SIZE("d_ff", model.d_ff, "feed-forward width"),
      FA_SIZE("max_len", model.max_len, "longest sentence per side"),
      FA_REAL("dropout", model.dropout, "dropout rate"),
      FA_SIZE("slots", model.slots, "universal embedding rows"),
      FA_REAL("tau", model.tau, "mixture temperature"),
      Field{"sign", "similarity|literal", [](const ExperimentConfig& c) { return std::string(similarity_sign_name(c.model.sign)); },
            [](ExperimentConfig& c, const std::string& v) { c.model.sign = parse_similarity_sign(v); }},
      FA_BOOL("zero_output_layer", model.zero_output_layer, "start the output projection at zero"),

      FA_REAL("meta_lr", meta.meta_lr, "outer step size"),
      FA_REAL("inner_lr", meta.inner_lr, "simulated inner step size"),
      FA_SIZE("episodes_per_update", meta.episodes_per_update, "episodes per outer step"),
      Field{"estimator", "exact|hvp|first_order", [](const ExperimentConfig& c) { return std::string(estimator_name(c.meta.estimator)); },
            [](ExperimentConfig& c, const std::string& v) { c.meta.estimator = parse_estimator(v); }},
      FA_REAL("nu", meta.nu, "finite-difference step of the hvp estimator"),
      FA_SIZE("total_updates", meta.total_updates, "outer steps"),
      FA_SIZE("d_tokens", meta.d_tokens, "target tokens in the inner-step subset"),
      FA_SIZE("dprime_tokens", meta.dprime_tokens, "target tokens in the evaluation subset"),
      Field{"aggregate", "sum|mean over episodes",
            [](const ExperimentConfig& c) { return std::string(c.meta.mean_over_episodes ? "mean" : "sum"); },
            [](ExperimentConfig& c, const std::string& v) {
              if (v != "sum" && v != "mean") throw std::invalid_argument("aggregate: expected sum|mean");
              c.meta.mean_over_episodes = v == "mean";
            }},
      Field{"outer_optimizer", "sgd|adam", [](const ExperimentConfig& c) { return std::string(optimizer_name(c.meta.outer_optimizer)); },
            [](ExperimentConfig& c, const std::string& v) { c.meta.outer_optimizer = parse_optimizer(v); }},
      FA_SIZE("eval_every", meta.eval_every, "outer steps between validation events"),
      FA_BOOL("meta_dropout", meta.dropout, "dropout during pretraining"),
      FA_SIZE("exact_parameter_limit", meta.exact_parameter_limit, "largest model for the exact estimator"),
      FA_REAL("divergence_loss", meta.divergence_loss, "episode loss treated as divergence"),

      FA_REAL("ft_lr", learn.inner_lr, "fine-tuning learning rate"),
      Field{"ft_optimizer", "sgd|adam", [](const ExperimentConfig& c) { return std::string(optimizer_name(c.learn.optimizer)); },
            [](ExperimentConfig& c, const std::string& v) { c.learn.optimizer = parse_optimizer(v); }},
      FA_SIZE("ft_steps", learn.max_steps, "fine-tuning step limit"),
      FA_SIZE("ft_patience", learn.patience, "dev evaluations without improvement before stopping (0: never)"),
      FA_SIZE("ft_eval_every", learn.eval_every, "steps between dev evaluations"),
      FA_SIZE("ft_batch_tokens", learn.batch_tokens, "target tokens per fine-tuning batch"),
      FA_REAL("beta", learn.beta, "proximity penalty weight"),
      FA_BOOL("ft_dropout", learn.dropout, "dropout during fine-tuning"),

      FA_SIZE("val_tokens", validation_setup.train_tokens, "validation-task training budget"),
      FA_SIZE("val_sentences", validation_setup.max_sentences, "validation dev sentences decoded"),
      FA_SIZE("val_steps", validation_setup.learn.max_steps, "validation fine-tuning steps"),
      FA_REAL("val_lr", validation_setup.learn.inner_lr, "validation fine-tuning learning rate"),

      FA_SIZE("family_sources", family.n_sources, "generated source languages"),
      FA_SIZE("family_targets", family.n_targets, "generated target languages"),
      FA_BOOL("family_validation", family.validation_language, "generate a validation language"),
      FA_SIZE("latent_vocab", family.latent_vocab, "shared latent words"),
      FA_SIZE("vocab_size", family.vocab_size, "word types per generated language"),
      FA_REAL("zipf", family.zipf_exponent, "word frequency exponent"),
      FA_SIZE("word_classes", family.n_classes, "latent word classes; sentences cycle through them"),
      FA_SIZE("min_sentence", family.min_len, "shortest generated sentence"),
      FA_SIZE("max_sentence", family.max_len, "longest generated sentence"),
      FA_REAL("coverage", family.source_coverage, "fraction of latent words a source uses"),
      FA_SIZE("source_train", family.source_train, "training sentences per source language"),
      FA_SIZE("target_train", family.target_train, "training sentences per target/validation language"),
      FA_SIZE("dev_size", family.dev, "dev sentences per language"),
      FA_SIZE("test_size", family.test, "test sentences per language"),
      FA_REAL("rotation", family.rotation, "embedding misalignment (rotation scale)"),
      FA_REAL("noise", family.noise, "embedding noise"),
      FA_BOOL("identity_transforms", family.identity_transforms, "every language spelled like the pivot"),
      FA_BOOL("shared_sentences", family.shared_sentences, "all languages share latent sentences"),
      Field{"family_seed", "generator seed", [](const ExperimentConfig& c) { return std::to_string(c.family.seed); },
            [](ExperimentConfig& c, const std::string& v) { c.family.seed = to_uint("family_seed", v); }},
  };
  return f;
}

#undef FA_SIZE
#undef FA_REAL
#undef FA_BOOL
#undef FA_STR

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw std::invalid_argument("unknown configuration key '" + key + "'");
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  model.d_model = 16;
  model.n_layer = 2;
  model.n_head = 2;
  model.d_ff = 32;
  model.max_len = 12;
  model.dropout = 0.0;
  model.slots = 100;

  meta.meta_lr = 5e-3;
  meta.inner_lr = 3e-2;
  meta.outer_optimizer = OptimizerKind::adam;
  meta.total_updates = 2000;
  meta.d_tokens = 128;
  meta.dprime_tokens = 128;
  meta.eval_every = 200;

  learn.inner_lr = 3e-3;
  learn.max_steps = 300;
  learn.batch_tokens = 256;
  learn.eval_every = 20;
  learn.patience = 3;

  validation_setup.learn = learn;
  validation_setup.learn.max_steps = 40;
  validation_setup.learn.patience = 0;
  validation_setup.train_tokens = 4000;
  validation_setup.max_sentences = 100;

  family.latent_vocab = 100;
  family.vocab_size = 100;
  family.dim = model.d_model;
  family.source_train = 6000;
  family.target_train = 26000;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string ExperimentConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

const std::string& ExperimentConfig::describe(const std::string& key) { return field(key).help; }

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

void ExperimentConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(no) + ": expected key = value");
    }
    try {
      set(trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

void ExperimentConfig::apply_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  apply_text(ss.str(), path.string());
}

fs::path ExperimentConfig::resolved_output_dir() const {
  if (!output_dir.empty()) return output_dir;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

void ExperimentConfig::validate() const {
  model.validate();
  meta.validate();
  learn.validate();
  if (seeds.empty()) throw std::invalid_argument("config: seeds is empty");
  if (budgets.empty()) throw std::invalid_argument("config: budgets is empty");
  if (strategies.empty()) throw std::invalid_argument("config: strategies is empty");
  if (inits.empty()) throw std::invalid_argument("config: inits is empty");
  for (std::size_t b : budgets) {
    if (b == 0) throw std::invalid_argument("config: budgets must be positive");
  }
}

// ---- metrics --------------------------------------------------------------

std::string MetricsRecord::to_json() const {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j;
  j["run"] = run;
  j["seed"] = seed;
  j["step"] = step;
  j["task"] = task;
  j["split"] = split;
  j["loss"] = num(loss);
  j["bleu"] = num(bleu);
  j["budget"] = budget;
  j["seconds"] = seconds;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  auto num = [&](const char* k) { return j.at(k).is_null() ? kNaN : j.at(k).get<double>(); };
  MetricsRecord r;
  r.run = j.at("run").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.step = j.at("step").get<std::size_t>();
  r.task = j.at("task").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.loss = num("loss");
  r.bleu = num("bleu");
  r.budget = j.at("budget").get<std::size_t>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

MetricsLog::MetricsLog(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, std::ios::app);
  if (!*out_) throw std::runtime_error("cannot append to " + path.string());
}

void MetricsLog::append(const MetricsRecord& r) {
  records_.push_back(r);
  if (out_) {
    *out_ << r.to_json() << '\n';
    out_->flush();
  }
}

std::vector<MetricsRecord> MetricsLog::read(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

// ---- experiment -----------------------------------------------------------

namespace {

std::string sources_tag(const std::vector<std::string>& sources, const std::vector<std::string>& all) {
  if (sources == all) return "all";
  std::string tag;
  for (const auto& s : sources) tag += (tag.empty() ? "" : "+") + s;
  return tag;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Experiment::Experiment(ExperimentConfig cfg, MetricsLog* log) : cfg_(std::move(cfg)), log_(log) {
  cfg_.validate();
  family_ = load_family(cfg_.family_dir, cfg_.model.max_len);
  if (family_.manifest.dim != cfg_.model.d_model) {
    throw std::invalid_argument("family embeddings have dimension " + std::to_string(family_.manifest.dim) +
                                " but d_model is " + std::to_string(cfg_.model.d_model));
  }
  languages_ = family_.languages();
  context_ = init_model(cfg_.model, family_.pivot_query, family_.target_vocab->size(), languages_, 0).context;
  for (const auto& name : source_names()) family_.task(name);
  for (const auto& name : target_names()) family_.task(name);
}

std::vector<std::string> Experiment::source_names() const {
  return cfg_.sources.empty() ? family_.manifest.names(LanguageRole::source) : cfg_.sources;
}

std::vector<std::string> Experiment::target_names() const {
  return cfg_.targets.empty() ? family_.manifest.names(LanguageRole::target) : cfg_.targets;
}

std::optional<std::string> Experiment::validation_name() const {
  if (cfg_.validation == "none") return std::nullopt;
  if (!cfg_.validation.empty()) return cfg_.validation;
  auto v = family_.manifest.names(LanguageRole::validation);
  if (v.empty()) return std::nullopt;
  return v.front();
}

ParamSet Experiment::initial(std::uint64_t seed) const {
  return init_model(cfg_.model, family_.pivot_query, family_.target_vocab->size(), languages_,
                    derive_seed(seed, "init"))
      .params;
}

fs::path Experiment::checkpoint_path(InitKind kind, const std::vector<std::string>& sources, std::uint64_t seed) const {
  return cfg_.resolved_output_dir() / "checkpoints" /
         (std::string(init_name(kind)) + "-" + sources_tag(sources, source_names()) + "-s" + std::to_string(seed) +
          ".ckpt");
}

void Experiment::log(const MetricsRecord& r) {
  if (log_) log_->append(r);
}

MetaResult Experiment::pretrain(InitKind kind, const std::vector<std::string>& sources, std::uint64_t seed) {
  MetaResult res;
  if (kind == InitKind::random) {
    res.params = initial(seed);
    return res;
  }
  if (sources.empty()) throw std::invalid_argument("pretrain: no source languages");
  if (kind == InitKind::transfer && sources.size() != 1) {
    throw std::invalid_argument("pretrain: transfer takes exactly one source language");
  }
  fs::path ckpt = checkpoint_path(kind, sources, seed);
  if (cfg_.reuse_checkpoints && fs::exists(ckpt)) {
    Checkpoint c = load_checkpoint(ckpt);
    if (config_hash(c.context.config) != config_hash(cfg_.model) || !c.params.same_structure(initial(seed))) {
      throw std::runtime_error("checkpoint " + ckpt.string() + " does not match the model configuration");
    }
    res.params = std::move(c.params);
    return res;
  }
  if (!cfg_.pretrain) {
    throw std::runtime_error(std::string("missing checkpoint for init '") + init_name(kind) + "': " + ckpt.string());
  }

  std::string run = std::string(init_name(kind)) + "/" + sources_tag(sources, source_names());
  std::vector<const Task*> tasks;
  for (const auto& s : sources) tasks.push_back(&family_.task(s));
  Validator validator;
  std::string val_task;
  if (auto v = validation_name()) {
    if (std::find(sources.begin(), sources.end(), *v) != sources.end()) {
      throw std::invalid_argument("pretrain: validation language " + *v + " is also a source");
    }
    ValidationSetup vs = cfg_.validation_setup;
    vs.seed = derive_seed(seed, "validation");
    vs.learn.seed = vs.seed;
    validator = finetune_validator(context_, family_.task(*v), vs);
    val_task = *v;
  }
  MetaConfig mc = cfg_.meta;
  mc.seed = derive_seed(seed, "pretrain/" + run);
  RecordSink sink = [&](const MetaRecord& r) {
    if (r.update > 0 && (r.update % mc.eval_every == 0 || r.update == mc.total_updates)) {
      log({run, seed, r.update, sources_tag(sources, source_names()), "train", r.train_loss, kNaN, 0, r.seconds});
    }
    if (!std::isnan(r.val_bleu)) log({run, seed, r.update, val_task, "val", r.val_loss, r.val_bleu, 0, r.seconds});
  };
  ParamSet theta = initial(seed);
  if (kind == InitKind::meta) {
    res = meta_train(theta, context_, tasks, mc, validator, sink);
  } else {
    res = multilingual_train(theta, context_, tasks, mc, validator, sink);
  }
  fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, {res.params, context_, "run = " + run + "\nseed = " + std::to_string(seed) + "\n" + cfg_.serialize()});
  return res;
}

double Experiment::test_bleu(const ParamSet& params, const std::string& target) const {
  const Task& t = family_.task(target);
  std::size_t n = cfg_.test_sentences ? std::min(cfg_.test_sentences, t.test.size()) : t.test.size();
  if (n == 0) throw std::invalid_argument("task " + target + " has no test split");
  std::vector<std::vector<int>> sources, refs;
  for (std::size_t i = 0; i < n; ++i) {
    sources.push_back(t.test[i].source);
    refs.push_back(t.test[i].target);
  }
  return bleu(greedy_decode_batch(params, context_, t.source, sources, cfg_.model.max_len), refs, cfg_.bleu);
}

FinetuneOutcome Experiment::finetune(const ParamSet& theta0, const std::string& target, std::size_t budget,
                                     FinetuneStrategy strategy, std::uint64_t seed, const std::string& run) {
  auto t0 = std::chrono::steady_clock::now();
  const Task& t = family_.task(target);
  std::string tag = target + "/" + std::to_string(budget);
  Batch train = subsample_by_tokens(t.train, budget, derive_seed(seed, "subsample/" + tag));
  LearnConfig lc = cfg_.learn;
  lc.strategy = strategy;
  lc.seed = derive_seed(seed, "finetune/" + tag);
  LearnResult r = learn(theta0, context_, t, train, t.dev, lc);
  FinetuneOutcome out;
  out.steps = r.steps;
  out.dev_loss = t.dev.empty() ? kNaN : corpus_loss(r.params, context_, t.source, t.dev);
  out.test_bleu = test_bleu(r.params, target);
  out.params = std::move(r.params);
  log({run + "/" + strategy_name(strategy), seed, out.steps, target, "test", out.dev_loss, out.test_bleu, budget,
       seconds_since(t0)});
  return out;
}

double Experiment::zero_shot(const ParamSet& theta0, const std::string& target, std::uint64_t seed,
                             const std::string& run) {
  auto t0 = std::chrono::steady_clock::now();
  double b = test_bleu(theta0, target);
  log({run + "/zero", seed, 0, target, "test", kNaN, b, 0, seconds_since(t0)});
  return b;
}

double zero_shot_eval(const Checkpoint& ckpt, const Task& target, std::size_t test_sentences, const BleuOptions& opts) {
  const std::string& lang = target.source.language;
  std::string dname = delta_name(lang);
  std::size_t d = ckpt.context.config.d_model;
  if (ckpt.context.target_vocab != target.target_vocab->size()) {
    throw std::invalid_argument("zero_shot_eval: checkpoint target vocabulary has " +
                                std::to_string(ckpt.context.target_vocab) + " entries, task has " +
                                std::to_string(target.target_vocab->size()));
  }
  if (target.source.query.rank() != 2 || target.source.query.dim(1) != d) {
    throw std::invalid_argument("zero_shot_eval: query embeddings of " + lang + " do not have dimension " +
                                std::to_string(d));
  }
  if (!ckpt.params.contains(dname) || ckpt.params.at(dname).shape() != target.source.query.shape()) {
    throw std::invalid_argument("zero_shot_eval: checkpoint has no matching embedding table for " + lang);
  }
  std::size_t n = test_sentences ? std::min(test_sentences, target.test.size()) : target.test.size();
  if (n == 0) throw std::invalid_argument("zero_shot_eval: task " + target.name + " has no test split");
  ParamSet params = ckpt.params;
  params.set(dname, Tensor::zeros(params.at(dname).shape()));
  std::vector<std::vector<int>> sources, refs;
  for (std::size_t i = 0; i < n; ++i) {
    sources.push_back(target.test[i].source);
    refs.push_back(target.test[i].target);
  }
  return bleu(greedy_decode_batch(params, ckpt.context, target.source, sources, ckpt.context.config.max_len), refs,
              opts);
}

// ---- grid -----------------------------------------------------------------

double GridCell::mean() const {
  if (values.empty()) return kNaN;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double GridCell::stddev() const {
  if (values.size() < 2) return 0.0;
  double m = mean(), s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size() - 1));
}

const GridCell& GridSummary::cell(InitKind init, const std::string& target, std::size_t budget,
                                  FinetuneStrategy strategy) const {
  for (const auto& c : cells) {
    if (c.init == init && c.target == target && c.budget == budget && c.strategy == strategy) return c;
  }
  throw std::out_of_range(std::string("no grid cell for ") + init_name(init) + "/" + target + "/" +
                          std::to_string(budget) + "/" + strategy_name(strategy));
}

std::string GridSummary::csv() const {
  std::ostringstream os;
  os << "init,target,budget,strategy,n,mean,stddev,values\n";
  for (const auto& c : cells) {
    os << init_name(c.init) << ',' << c.target << ',' << c.budget << ',' << strategy_name(c.strategy) << ','
       << c.values.size() << ',' << fmt(c.mean()) << ',' << fmt(c.stddev()) << ',';
    for (std::size_t i = 0; i < c.values.size(); ++i) os << (i ? ";" : "") << fmt(c.values[i]);
    os << '\n';
  }
  return os.str();
}

std::string GridSummary::table() const {
  std::vector<std::vector<std::string>> rows{{"init", "target", "budget", "strategy", "n", "BLEU mean", "stddev"}};
  for (const auto& c : cells) {
    std::ostringstream m, s;
    m << std::fixed << std::setprecision(2) << c.mean();
    s << std::fixed << std::setprecision(2) << c.stddev();
    rows.push_back({init_name(c.init), c.target, std::to_string(c.budget), strategy_name(c.strategy),
                    std::to_string(c.values.size()), m.str(), s.str()});
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      bool numeric = i >= 4;
      os << (i ? "  " : "") << (numeric ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << r[i];
    }
    os << '\n';
  }
  return os.str();
}

GridSummary run_comparison_grid(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::path out = cfg.resolved_output_dir();
  fs::create_directories(out);
  {
    std::ofstream os(out / "config.txt");
    os << cfg.serialize();
  }
  MetricsLog log(out / "metrics.jsonl");
  Experiment ex(cfg, &log);
  std::vector<std::string> sources = ex.source_names();
  std::vector<std::string> targets = ex.target_names();

  GridSummary summary;
  for (InitKind init : cfg.inits) {
    for (const auto& t : targets) {
      for (std::size_t b : cfg.budgets) {
        for (FinetuneStrategy s : cfg.strategies) summary.cells.push_back({init, t, b, s, {}});
      }
    }
  }
  auto cell_for = [&](InitKind init, const std::string& t, std::size_t b, FinetuneStrategy s) -> GridCell& {
    return const_cast<GridCell&>(summary.cell(init, t, b, s));
  };

  for (std::uint64_t seed : cfg.seeds) {
    for (InitKind init : cfg.inits) {
      std::vector<std::vector<std::string>> groups;
      if (init == InitKind::transfer) {
        if (!cfg.transfer_source.empty()) {
          groups.push_back({cfg.transfer_source});
        } else {
          for (const auto& s : sources) groups.push_back({s});
        }
      } else {
        groups.push_back(sources);
      }
      std::map<std::tuple<std::string, std::size_t, FinetuneStrategy>, double> best;
      for (const auto& group : groups) {
        ParamSet theta0 = ex.pretrain(init, group, seed).params;
        std::string run = std::string(init_name(init)) + (init == InitKind::transfer ? "/" + group.front() : "");
        for (const auto& t : targets) {
          for (std::size_t b : cfg.budgets) {
            for (FinetuneStrategy s : cfg.strategies) {
              double v = ex.finetune(theta0, t, b, s, seed, run).test_bleu;
              auto key = std::make_tuple(t, b, s);
              auto it = best.find(key);
              if (it == best.end() || v > it->second) best[key] = v;
            }
          }
        }
      }
      for (const auto& [key, v] : best) cell_for(init, std::get<0>(key), std::get<1>(key), std::get<2>(key)).values.push_back(v);
    }
  }
  {
    std::ofstream os(out / "summary.csv");
    os << summary.csv();
  }
  {
    std::ofstream os(out / "summary.txt");
    os << summary.table();
  }
  return summary;
}

}  // namespace fastadapt
