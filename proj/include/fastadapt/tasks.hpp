#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fastadapt/model.hpp"
#include "fastadapt/vocab.hpp"

namespace fastadapt {

enum class Tokenizer { whitespace, character };
Tokenizer parse_tokenizer(const std::string& s);

using Sentence = std::vector<std::string>;
using TextPair = std::pair<Sentence, Sentence>;

struct Corpus {
  std::vector<TextPair> pairs;
  std::vector<std::size_t> train, dev, test;  // indices into pairs

  // Throws if splits overlap, index out of range, or a sentence is empty.
  void validate() const;
};

struct SplitRatios {
  double dev = 0.0;
  double test = 0.0;
  std::uint64_t seed = 0;
};

// "source<TAB>target" per line. Companion files next to `path` with the
// extension replaced by .dev / .test hold either one line index per line
// (into `path`) or standalone pairs. Without companions, `ratios` (if given)
// carves dev/test out of the file; otherwise everything is train.
Corpus load_corpus(const std::filesystem::path& path, Tokenizer tokenizer = Tokenizer::whitespace,
                   std::optional<SplitRatios> ratios = std::nullopt);

void write_pairs(const std::filesystem::path& path, const std::vector<TextPair>& pairs);

// Shuffled train pairs (deterministic per seed) taken until the target-side
// token count first reaches `budget`. Dev/test untouched. Shortfalls return
// the whole train split with a warning.
Corpus subsample_by_tokens(const Corpus& corpus, std::size_t budget, std::uint64_t seed);

std::size_t target_word_count(const Corpus& corpus, const std::vector<std::size_t>& indices);

// A language pair ready for the model: id-encoded splits plus the source
// side's frozen query embeddings.
struct Task {
  std::string name;
  SourceSide source;
  std::shared_ptr<const Vocabulary> source_vocab;
  std::shared_ptr<const Vocabulary> target_vocab;
  Batch train, dev, test;
};

// Encodes a corpus; pairs with either side longer than max_len are dropped
// and the count is logged.
Task make_task(const std::string& name, const Corpus& corpus, SourceSide source,
               std::shared_ptr<const Vocabulary> source_vocab, std::shared_ptr<const Vocabulary> target_vocab,
               std::size_t max_len);

// Same selection rule as subsample_by_tokens, on an encoded train split.
Batch subsample_by_tokens(const Batch& train, std::size_t budget, std::uint64_t seed);

std::size_t target_word_count(const Batch& pairs);

// ---- synthetic family --------------------------------------------------

// Chunks of `window` tokens starting at `offset` are permuted by `perm`;
// the head before `offset` and an incomplete tail stay in place.
struct ReorderRule {
  std::size_t window = 1;
  std::vector<std::size_t> perm{0};
  std::size_t offset = 0;

  bool is_identity() const;
  std::string str() const;
};

template <class T>
std::vector<T> apply_rule(const ReorderRule& rule, const std::vector<T>& seq) {
  std::vector<T> out = seq;
  for (std::size_t start = rule.offset; start + rule.window <= seq.size(); start += rule.window) {
    for (std::size_t i = 0; i < rule.window; ++i) out[start + i] = seq[start + rule.perm[i]];
  }
  return out;
}

// Latent sentence template: a sequence of word-class ids with a weight.
struct SentenceTemplate {
  std::vector<std::size_t> classes;
  double weight = 1.0;
};

enum class LanguageRole { source, validation, target };
const char* role_name(LanguageRole r);
LanguageRole parse_role(const std::string& s);

struct SyntheticFamilySpec {
  std::size_t n_sources = 6;
  std::size_t n_targets = 2;
  bool validation_language = true;
  std::size_t latent_vocab = 300;
  std::size_t vocab_size = 300;  // word types per language, >= latent_vocab
  std::size_t dim = 64;          // embedding dimension
  double zipf_exponent = 1.0;
  // Word classes partition the latent vocabulary by index modulo n_classes.
  // Several classes make the canonical word order recoverable from a reordered sentence.
  std::size_t n_classes = 3;
  // Empty: one template per length in [min_len, max_len] cycling through the classes.
  std::vector<SentenceTemplate> templates;
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  double source_coverage = 0.6;  // fraction of latent words a source uses
  std::size_t source_train = 20000;
  std::size_t target_train = 26000;
  std::size_t dev = 300;
  std::size_t test = 400;
  double rotation = 0.3;
  double noise = 0.05;
  bool identity_transforms = false;  // every language = English spelling-for-spelling
  bool shared_sentences = false;     // all languages draw the same latent sentences
  std::uint64_t seed = 1;

  void validate() const;
};

struct FamilyLanguage {
  std::string name;
  LanguageRole role = LanguageRole::source;
  ReorderRule rule;
  std::string corpus;      // file names relative to the family directory
  std::string vocab;
  std::string embeddings;
  std::string truth;
  std::size_t train = 0, dev = 0, test = 0;
  std::size_t covered_words = 0;
};

struct FamilyManifest {
  std::string pivot = "en";
  std::string pivot_vocab;
  std::string pivot_embeddings;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::size_t latent_vocab = 0;
  std::vector<FamilyLanguage> languages;

  std::vector<std::string> names(LanguageRole role) const;
  const FamilyLanguage& language(const std::string& name) const;
};

inline constexpr const char* kManifestFile = "family.json";

// Writes corpora, vocabularies, aligned query embeddings, ground-truth
// lexicons and the manifest into `dir`.
FamilyManifest generate_family(const SyntheticFamilySpec& spec, const std::filesystem::path& dir);

FamilyManifest read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const FamilyManifest& m);

// Everything a run needs from a family directory.
struct Family {
  FamilyManifest manifest;
  std::shared_ptr<const Vocabulary> target_vocab;
  Tensor pivot_query;
  std::map<std::string, Task> tasks;  // by language name

  const Task& task(const std::string& language) const;
  std::vector<LanguageInfo> languages() const;
};

Family load_family(const std::filesystem::path& dir, std::size_t max_len);

// Deterministic sub-seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

}  // namespace fastadapt
