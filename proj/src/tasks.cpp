#include "fastadapt/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fastadapt/ulr.hpp"

namespace fastadapt {

namespace fs = std::filesystem;
using json = nlohmann::json;

Tokenizer parse_tokenizer(const std::string& s) {
  if (s == "whitespace") return Tokenizer::whitespace;
  if (s == "char") return Tokenizer::character;
  throw std::invalid_argument("unknown tokenizer '" + s + "' (expected whitespace|char)");
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- corpus -------------------------------------------------------------

void Corpus::validate() const {
  std::set<std::size_t> seen;
  for (const auto* split : {&train, &dev, &test}) {
    for (std::size_t i : *split) {
      if (i >= pairs.size()) throw std::out_of_range("corpus: split index " + std::to_string(i) + " out of range");
      if (!seen.insert(i).second) throw std::invalid_argument("corpus: pair " + std::to_string(i) + " in two splits");
    }
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first.empty() || pairs[i].second.empty()) {
      throw std::invalid_argument("corpus: pair " + std::to_string(i) + " has an empty side");
    }
  }
}

namespace {

Sentence tokenize(const std::string& text, Tokenizer tok) {
  Sentence out;
  if (tok == Tokenizer::whitespace) {
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(w);
  } else {
    for (char c : text) {
      if (c != ' ' && c != '\t') out.emplace_back(1, c);
    }
  }
  return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

TextPair parse_pair(const std::string& line, Tokenizer tok, const fs::path& path, std::size_t lineno) {
  auto tab = line.find('\t');
  if (tab == std::string::npos) {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": missing tab between source and target");
  }
  TextPair p{tokenize(line.substr(0, tab), tok), tokenize(line.substr(tab + 1), tok)};
  if (p.first.empty() || p.second.empty()) {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty sentence");
  }
  return p;
}

bool is_index_line(const std::string& line) {
  if (line.empty()) return false;
  return std::all_of(line.begin(), line.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Reads a companion split file; returns the indices it designates, appending
// standalone pairs to the corpus when needed.
std::vector<std::size_t> read_companion(const fs::path& path, Corpus& corpus, std::size_t main_size, Tokenizer tok) {
  std::vector<std::string> lines = read_lines(path);
  std::vector<std::size_t> out;
  bool indices = !lines.empty() && std::all_of(lines.begin(), lines.end(), is_index_line);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (indices) {
      std::size_t idx = std::stoull(lines[i]);
      if (idx >= main_size) {
        throw std::runtime_error(path.string() + ":" + std::to_string(i + 1) + ": line index " + lines[i] +
                                 " beyond the " + std::to_string(main_size) + " pairs of the corpus");
      }
      out.push_back(idx);
    } else {
      corpus.pairs.push_back(parse_pair(lines[i], tok, path, i + 1));
      out.push_back(corpus.pairs.size() - 1);
    }
  }
  return out;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

template <class SizeOf>
std::size_t take_until(const std::vector<std::size_t>& order, std::size_t budget, SizeOf size_of) {
  std::size_t tokens = 0, n = 0;
  while (n < order.size() && tokens < budget) tokens += size_of(order[n++]);
  return n;
}

}  // namespace

Corpus load_corpus(const fs::path& path, Tokenizer tokenizer, std::optional<SplitRatios> ratios) {
  std::vector<std::string> lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("corpus: " + path.string() + " is empty");
  Corpus c;
  for (std::size_t i = 0; i < lines.size(); ++i) c.pairs.push_back(parse_pair(lines[i], tokenizer, path, i + 1));
  std::size_t main_size = c.pairs.size();

  fs::path dev_path = fs::path(path).replace_extension(".dev");
  fs::path test_path = fs::path(path).replace_extension(".test");
  bool companions = false;
  if (dev_path != path && fs::exists(dev_path)) {
    c.dev = read_companion(dev_path, c, main_size, tokenizer);
    companions = true;
  }
  if (test_path != path && fs::exists(test_path)) {
    c.test = read_companion(test_path, c, main_size, tokenizer);
    companions = true;
  }
  if (companions) {
    std::set<std::size_t> held(c.dev.begin(), c.dev.end());
    held.insert(c.test.begin(), c.test.end());
    for (std::size_t i = 0; i < main_size; ++i) {
      if (!held.count(i)) c.train.push_back(i);
    }
  } else if (ratios && (ratios->dev > 0.0 || ratios->test > 0.0)) {
    if (ratios->dev < 0.0 || ratios->test < 0.0 || ratios->dev + ratios->test >= 1.0) {
      throw std::invalid_argument("corpus: split ratios must be >= 0 and sum below 1");
    }
    std::vector<std::size_t> all(main_size);
    std::iota(all.begin(), all.end(), 0);
    all = shuffled(std::move(all), ratios->seed);
    auto n_dev = static_cast<std::size_t>(std::floor(ratios->dev * static_cast<double>(main_size)));
    auto n_test = static_cast<std::size_t>(std::floor(ratios->test * static_cast<double>(main_size)));
    c.dev.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_dev));
    c.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_dev),
                  all.begin() + static_cast<std::ptrdiff_t>(n_dev + n_test));
    c.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_dev + n_test), all.end());
    std::sort(c.dev.begin(), c.dev.end());
    std::sort(c.test.begin(), c.test.end());
    std::sort(c.train.begin(), c.train.end());
  } else {
    c.train.resize(main_size);
    std::iota(c.train.begin(), c.train.end(), 0);
  }
  c.validate();
  return c;
}

void write_pairs(const fs::path& path, const std::vector<TextPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto join = [](const Sentence& s) {
    std::string r;
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? " " : "") + s[i];
    return r;
  };
  for (const auto& p : pairs) out << join(p.first) << '\t' << join(p.second) << '\n';
}

std::size_t target_word_count(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  std::size_t n = 0;
  for (std::size_t i : indices) n += corpus.pairs.at(i).second.size();
  return n;
}

Corpus subsample_by_tokens(const Corpus& corpus, std::size_t budget, std::uint64_t seed) {
  if (budget == 0) throw std::invalid_argument("subsample_by_tokens: budget must be >= 1");
  Corpus out = corpus;
  std::vector<std::size_t> order = shuffled(corpus.train, seed);
  std::size_t n = take_until(order, budget, [&](std::size_t i) { return corpus.pairs[i].second.size(); });
  order.resize(n);
  if (target_word_count(corpus, order) < budget) {
    std::clog << "warning: train split has " << target_word_count(corpus, order) << " target tokens, below budget "
              << budget << "; using all of it\n";
  }
  out.train = std::move(order);
  return out;
}

std::size_t target_word_count(const Batch& pairs) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.target.size();
  return n;
}

Batch subsample_by_tokens(const Batch& train, std::size_t budget, std::uint64_t seed) {
  if (budget == 0) throw std::invalid_argument("subsample_by_tokens: budget must be >= 1");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  order = shuffled(std::move(order), seed);
  std::size_t n = take_until(order, budget, [&](std::size_t i) { return train[i].target.size(); });
  Batch out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(train[order[k]]);
  if (target_word_count(out) < budget) {
    std::clog << "warning: train split has " << target_word_count(out) << " target tokens, below budget " << budget
              << "; using all of it\n";
  }
  return out;
}

Task make_task(const std::string& name, const Corpus& corpus, SourceSide source,
               std::shared_ptr<const Vocabulary> source_vocab, std::shared_ptr<const Vocabulary> target_vocab,
               std::size_t max_len) {
  if (source.query.rank() != 2 || source.query.dim(0) != source_vocab->size()) {
    throw std::invalid_argument("task " + name + ": query rows " + shape_str(source.query.shape()) +
                                " do not match source vocabulary size " + std::to_string(source_vocab->size()));
  }
  Task t{name, std::move(source), source_vocab, target_vocab, {}, {}, {}};
  std::size_t dropped = 0;
  auto encode = [&](const std::vector<std::size_t>& idx, Batch& out) {
    for (std::size_t i : idx) {
      const auto& p = corpus.pairs[i];
      if (p.first.size() > max_len || p.second.size() > max_len) {
        ++dropped;
        continue;
      }
      out.push_back({source_vocab->encode(p.first), target_vocab->encode(p.second)});
    }
  };
  encode(corpus.train, t.train);
  encode(corpus.dev, t.dev);
  encode(corpus.test, t.test);
  if (dropped > 0) std::clog << "task " << name << ": dropped " << dropped << " pairs longer than " << max_len << "\n";
  return t;
}

// ---- synthetic family ----------------------------------------------------

bool ReorderRule::is_identity() const {
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != i) return false;
  }
  return true;
}

std::string ReorderRule::str() const {
  std::string s = "w" + std::to_string(window) + "o" + std::to_string(offset) + "p";
  for (std::size_t p : perm) s += std::to_string(p);
  return s;
}

const char* role_name(LanguageRole r) {
  switch (r) {
    case LanguageRole::source: return "source";
    case LanguageRole::validation: return "validation";
    case LanguageRole::target: return "target";
  }
  return "unknown";
}

LanguageRole parse_role(const std::string& s) {
  if (s == "source") return LanguageRole::source;
  if (s == "validation") return LanguageRole::validation;
  if (s == "target") return LanguageRole::target;
  throw std::invalid_argument("unknown language role '" + s + "'");
}

void SyntheticFamilySpec::validate() const {
  if (latent_vocab == 0) throw std::invalid_argument("family: latent_vocab must be positive");
  if (vocab_size < latent_vocab) {
    throw std::invalid_argument("family: vocab_size " + std::to_string(vocab_size) + " is smaller than latent_vocab " +
                                std::to_string(latent_vocab));
  }
  if (n_sources == 0) throw std::invalid_argument("family: need at least one source language");
  if (dim == 0) throw std::invalid_argument("family: dim must be positive");
  if (n_classes == 0 || n_classes > latent_vocab) throw std::invalid_argument("family: bad n_classes");
  if (templates.empty() && (min_len == 0 || min_len > max_len)) throw std::invalid_argument("family: bad length range");
  for (const auto& t : templates) {
    if (t.classes.empty() || !(t.weight > 0.0)) throw std::invalid_argument("family: bad template");
    for (std::size_t c : t.classes) {
      if (c >= n_classes) throw std::invalid_argument("family: template uses unknown class");
    }
  }
  if (!(source_coverage > 0.0 && source_coverage <= 1.0)) {
    throw std::invalid_argument("family: source_coverage must be in (0, 1]");
  }
  if (rotation < 0.0 || noise < 0.0) throw std::invalid_argument("family: rotation and noise must be >= 0");
}

std::vector<std::string> FamilyManifest::names(LanguageRole role) const {
  std::vector<std::string> out;
  for (const auto& l : languages) {
    if (l.role == role) out.push_back(l.name);
  }
  return out;
}

const FamilyLanguage& FamilyManifest::language(const std::string& name) const {
  for (const auto& l : languages) {
    if (l.name == name) return l;
  }
  throw std::out_of_range("family: no language '" + name + "'");
}

namespace {

std::vector<ReorderRule> rule_pool() {
  std::vector<ReorderRule> pool;
  for (std::size_t off = 0; off < 2; ++off) pool.push_back({2, {1, 0}, off});
  std::vector<std::size_t> p{0, 1, 2};
  std::vector<std::vector<std::size_t>> perms;
  while (std::next_permutation(p.begin(), p.end())) perms.push_back(p);
  for (std::size_t off = 0; off < 3; ++off) {
    for (const auto& q : perms) pool.push_back({3, q, off});
  }
  return pool;
}

std::string english_token(std::size_t w) { return "e" + std::to_string(w); }

struct LatentSampler {
  // Per class: candidate latent words and their Zipf weights.
  std::vector<std::vector<std::size_t>> words;
  std::vector<std::discrete_distribution<std::size_t>> dists;
};

LatentSampler make_sampler(const SyntheticFamilySpec& spec, const std::vector<bool>& covered) {
  LatentSampler s;
  s.words.resize(spec.n_classes);
  std::vector<std::vector<double>> weights(spec.n_classes);
  for (std::size_t w = 0; w < spec.latent_vocab; ++w) {
    if (!covered[w]) continue;
    std::size_t c = w % spec.n_classes;
    s.words[c].push_back(w);
    weights[c].push_back(1.0 / std::pow(static_cast<double>(w + 1), spec.zipf_exponent));
  }
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    if (s.words[c].empty()) throw std::invalid_argument("family: coverage leaves word class " + std::to_string(c) + " empty");
    s.dists.emplace_back(weights[c].begin(), weights[c].end());
  }
  return s;
}

std::vector<SentenceTemplate> default_templates(const SyntheticFamilySpec& spec) {
  if (!spec.templates.empty()) return spec.templates;
  std::vector<SentenceTemplate> out;
  for (std::size_t len = spec.min_len; len <= spec.max_len; ++len) {
    std::vector<std::size_t> classes(len);
    for (std::size_t i = 0; i < len; ++i) classes[i] = i % spec.n_classes;
    out.push_back({std::move(classes), 1.0});
  }
  return out;
}

std::vector<std::vector<std::size_t>> sample_sentences(std::size_t n, LatentSampler& sampler,
                                                       const std::vector<SentenceTemplate>& templates,
                                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> tw;
  for (const auto& t : templates) tw.push_back(t.weight);
  std::discrete_distribution<std::size_t> pick(tw.begin(), tw.end());
  std::vector<std::vector<std::size_t>> out(n);
  for (auto& s : out) {
    const auto& t = templates[pick(rng)];
    for (std::size_t c : t.classes) s.push_back(sampler.words[c][sampler.dists[c](rng)]);
  }
  return out;
}

Tensor unit_gaussian_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      v[r * d + c] = g(rng);
      norm += v[r * d + c] * v[r * d + c];
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] /= norm;
  }
  return Tensor({n, d}, std::move(v));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json rule_json(const ReorderRule& r) { return {{"window", r.window}, {"perm", r.perm}, {"offset", r.offset}}; }

ReorderRule rule_from_json(const json& j) {
  return {j.at("window").get<std::size_t>(), j.at("perm").get<std::vector<std::size_t>>(),
          j.at("offset").get<std::size_t>()};
}

}  // namespace

FamilyManifest generate_family(const SyntheticFamilySpec& spec, const fs::path& dir) {
  spec.validate();
  fs::create_directories(dir);
  const std::size_t L = spec.latent_vocab, d = spec.dim;

  FamilyManifest m;
  m.seed = spec.seed;
  m.dim = d;
  m.latent_vocab = L;
  m.pivot_vocab = "en.vocab";
  m.pivot_embeddings = "en.emb";

  std::mt19937_64 latent_rng(derive_seed(spec.seed, "latent"));
  Tensor latent = unit_gaussian_rows(L, d, latent_rng);

  std::vector<std::string> en_tokens;
  for (std::size_t w = 0; w < L; ++w) en_tokens.push_back(english_token(w));
  Vocabulary(en_tokens).save(dir / m.pivot_vocab);
  write_embeddings(dir / m.pivot_embeddings, {en_tokens, latent});

  struct Plan {
    std::string name;
    LanguageRole role;
    std::size_t train;
  };
  std::vector<Plan> plans;
  for (std::size_t i = 0; i < spec.n_sources; ++i) plans.push_back({"src" + std::to_string(i + 1), LanguageRole::source, spec.source_train});
  if (spec.validation_language) plans.push_back({"val", LanguageRole::validation, spec.target_train});
  for (std::size_t i = 0; i < spec.n_targets; ++i) plans.push_back({"tgt" + std::to_string(i + 1), LanguageRole::target, spec.target_train});

  std::vector<ReorderRule> pool = rule_pool();
  std::mt19937_64 rule_rng(derive_seed(spec.seed, "rules"));
  std::shuffle(pool.begin(), pool.end(), rule_rng);
  if (!spec.identity_transforms && plans.size() > pool.size()) {
    throw std::invalid_argument("family: at most " + std::to_string(pool.size()) + " distinct reordering rules available");
  }
  auto templates = default_templates(spec);

  for (std::size_t li = 0; li < plans.size(); ++li) {
    const Plan& plan = plans[li];
    FamilyLanguage lang;
    lang.name = plan.name;
    lang.role = plan.role;
    lang.rule = spec.identity_transforms ? ReorderRule{} : pool[li];

    std::mt19937_64 rng(derive_seed(spec.seed, "language/" + plan.name));
    // Lexical bijection: latent word w -> spelling index spelling[w].
    std::vector<std::size_t> spelling(spec.vocab_size);
    std::iota(spelling.begin(), spelling.end(), 0);
    if (!spec.identity_transforms) std::shuffle(spelling.begin(), spelling.end(), rng);
    auto word = [&](std::size_t w) {
      return spec.identity_transforms ? english_token(w) : plan.name + "_" + std::to_string(spelling[w]);
    };

    std::vector<bool> covered(L, true);
    if (plan.role == LanguageRole::source && spec.source_coverage < 1.0) {
      std::vector<std::size_t> ids(L);
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      auto keep = static_cast<std::size_t>(std::llround(spec.source_coverage * static_cast<double>(L)));
      keep = std::max<std::size_t>(keep, 1);
      std::fill(covered.begin(), covered.end(), false);
      for (std::size_t k = 0; k < keep; ++k) covered[ids[k]] = true;
    }
    lang.covered_words = static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));

    // Vocabulary and aligned query embeddings in spelling order.
    std::vector<std::string> tokens(spec.vocab_size);
    std::vector<std::size_t> latent_of(spec.vocab_size, L);
    for (std::size_t w = 0; w < spec.vocab_size; ++w) {
      std::size_t slot = spec.identity_transforms ? w : spelling[w];
      tokens[slot] = word(w);
      if (w < L) latent_of[slot] = w;
    }
    Tensor extra = unit_gaussian_rows(spec.vocab_size, d, rng);
    std::vector<double> rows(spec.vocab_size * d);
    for (std::size_t j = 0; j < spec.vocab_size; ++j) {
      const double* src = latent_of[j] < L ? latent.ptr() + latent_of[j] * d : extra.ptr() + j * d;
      std::copy_n(src, d, rows.begin() + static_cast<std::ptrdiff_t>(j * d));
    }
    Tensor base({spec.vocab_size, d}, std::move(rows));
    Tensor query = spec.identity_transforms ? base : rotate_with_noise(base, spec.rotation, spec.noise, rng);

    lang.vocab = plan.name + ".vocab";
    lang.embeddings = plan.name + ".emb";
    lang.truth = plan.name + ".truth";
    lang.corpus = plan.name + "-en.txt";
    Vocabulary(tokens).save(dir / lang.vocab);
    write_embeddings(dir / lang.embeddings, {tokens, query});
    std::string truth;
    for (std::size_t w = 0; w < L; ++w) truth += word(w) + "\t" + english_token(w) + "\n";
    write_text(dir / lang.truth, truth);

    LatentSampler sampler = make_sampler(spec, covered);
    auto render = [&](const std::string& split, std::size_t n) {
      std::string tag = spec.shared_sentences ? "sentences/" + split : "sentences/" + plan.name + "/" + split;
      std::vector<TextPair> pairs;
      for (const auto& s : sample_sentences(n, sampler, templates, derive_seed(spec.seed, tag))) {
        Sentence src, tgt;
        for (std::size_t w : apply_rule(lang.rule, s)) src.push_back(word(w));
        for (std::size_t w : s) tgt.push_back(english_token(w));
        pairs.emplace_back(std::move(src), std::move(tgt));
      }
      return pairs;
    };
    fs::path corpus = dir / lang.corpus;
    write_pairs(corpus, render("train", plan.train));
    write_pairs(fs::path(corpus).replace_extension(".dev"), render("dev", spec.dev));
    write_pairs(fs::path(corpus).replace_extension(".test"), render("test", spec.test));
    lang.train = plan.train;
    lang.dev = spec.dev;
    lang.test = spec.test;
    m.languages.push_back(lang);
  }
  write_manifest(dir / kManifestFile, m);
  return m;
}

void write_manifest(const fs::path& file, const FamilyManifest& m) {
  json j;
  j["pivot"] = m.pivot;
  j["pivot_vocab"] = m.pivot_vocab;
  j["pivot_embeddings"] = m.pivot_embeddings;
  j["seed"] = m.seed;
  j["dim"] = m.dim;
  j["latent_vocab"] = m.latent_vocab;
  j["languages"] = json::array();
  for (const auto& l : m.languages) {
    j["languages"].push_back({{"name", l.name},
                              {"role", role_name(l.role)},
                              {"rule", rule_json(l.rule)},
                              {"corpus", l.corpus},
                              {"vocab", l.vocab},
                              {"embeddings", l.embeddings},
                              {"ground_truth", l.truth},
                              {"train", l.train},
                              {"dev", l.dev},
                              {"test", l.test},
                              {"covered_words", l.covered_words}});
  }
  write_text(file, j.dump(2) + "\n");
}

FamilyManifest read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read family manifest " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("family manifest " + file.string() + ": " + e.what());
  }
  FamilyManifest m;
  m.pivot = j.at("pivot").get<std::string>();
  m.pivot_vocab = j.at("pivot_vocab").get<std::string>();
  m.pivot_embeddings = j.at("pivot_embeddings").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.dim = j.at("dim").get<std::size_t>();
  m.latent_vocab = j.at("latent_vocab").get<std::size_t>();
  for (const auto& l : j.at("languages")) {
    FamilyLanguage fl;
    fl.name = l.at("name").get<std::string>();
    fl.role = parse_role(l.at("role").get<std::string>());
    fl.rule = rule_from_json(l.at("rule"));
    fl.corpus = l.at("corpus").get<std::string>();
    fl.vocab = l.at("vocab").get<std::string>();
    fl.embeddings = l.at("embeddings").get<std::string>();
    fl.truth = l.at("ground_truth").get<std::string>();
    fl.train = l.at("train").get<std::size_t>();
    fl.dev = l.at("dev").get<std::size_t>();
    fl.test = l.at("test").get<std::size_t>();
    fl.covered_words = l.at("covered_words").get<std::size_t>();
    m.languages.push_back(fl);
  }
  return m;
}

const Task& Family::task(const std::string& language) const {
  auto it = tasks.find(language);
  if (it == tasks.end()) throw std::out_of_range("family: no task for language '" + language + "'");
  return it->second;
}

std::vector<LanguageInfo> Family::languages() const {
  std::vector<LanguageInfo> out;
  for (const auto& l : manifest.languages) out.push_back({l.name, task(l.name).source_vocab->size()});
  return out;
}

Family load_family(const fs::path& dir, std::size_t max_len) {
  Family f;
  f.manifest = read_manifest(dir / kManifestFile);
  auto en = std::make_shared<const Vocabulary>(Vocabulary::load(dir / f.manifest.pivot_vocab));
  f.target_vocab = en;
  f.pivot_query = query_matrix(read_embeddings(dir / f.manifest.pivot_embeddings), *en);
  for (const auto& l : f.manifest.languages) {
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary::load(dir / l.vocab));
    Tensor query = query_matrix(read_embeddings(dir / l.embeddings), *vocab);
    if (query.dim(1) != f.pivot_query.dim(1)) {
      throw std::runtime_error("family: " + l.name + " embeddings have dimension " + std::to_string(query.dim(1)) +
                               ", pivot has " + std::to_string(f.pivot_query.dim(1)));
    }
    Corpus corpus = load_corpus(dir / l.corpus);
    f.tasks.emplace(l.name, make_task(l.name + "-" + f.manifest.pivot, corpus, {l.name, query}, vocab, en, max_len));
  }
  return f;
}

}  // namespace fastadapt
