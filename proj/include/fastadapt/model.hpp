#pragma once

// Encoder-decoder Transformer over ULR source embeddings and a plain target
// embedding table. Post-norm residual blocks, sinusoidal positions, separate
// output projection.

#include <cstdint>
#include <string>
#include <vector>

#include "fastadapt/autodiff.hpp"
#include "fastadapt/params.hpp"
#include "fastadapt/ulr.hpp"

namespace fastadapt {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layer = 2;
  std::size_t n_head = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 64;  // tokens per side, excluding bos/eos
  double dropout = 0.1;
  std::size_t slots = 64;  // universal embedding rows M
  double tau = kDefaultTemperature;
  SimilaritySign sign = SimilaritySign::similarity;
  bool zero_output_layer = false;

  void validate() const;
};

// Token-id sentence pair. Neither side carries bos/eos; the model adds them.
struct SentencePair {
  std::vector<int> source;
  std::vector<int> target;
};
using Batch = std::vector<SentencePair>;

std::size_t target_tokens(const SentencePair& p);  // target length + eos
std::size_t target_tokens(const Batch& batch);

// Source language identity and its frozen query embeddings [|V_k|, d].
struct SourceSide {
  std::string language;
  Tensor query;
};

struct ModelContext {
  ModelConfig config;
  UlrFrozen ulr;
  std::size_t target_vocab = 0;
};

struct LanguageInfo {
  std::string name;
  std::size_t vocab_size = 0;
};

struct ModelInit {
  ParamSet params;
  ModelContext context;
};

// Keys and the initial universal embeddings are the pivot language's query
// rows for its first `slots` non-reserved tokens. Every language in
// `languages` gets a zero delta table.
ModelInit init_model(const ModelConfig& cfg, const Tensor& pivot_query, std::size_t target_vocab,
                     const std::vector<LanguageInfo>& languages, std::uint64_t seed);

// Fresh transformer weights with the same names/shapes as `like`; ULR and
// delta entries are copied unchanged. Used for random-init baselines.
ParamSet reinitialize_network(const ParamSet& like, const ModelConfig& cfg, std::uint64_t seed);

struct ForwardOptions {
  bool train = false;  // enables dropout
  std::uint64_t dropout_seed = 0;
};

// Mean negative log-likelihood per target token (eos included).
Var batch_loss(Graph& g, const VarMap& params, const ModelContext& ctx, const SourceSide& src, const Batch& batch,
               const ForwardOptions& opts = {});

// Log-probabilities [B, T, V] for every decoder position (T = longest target + 1).
Var batch_log_probs(Graph& g, const VarMap& params, const ModelContext& ctx, const SourceSide& src,
                    const Batch& batch, const ForwardOptions& opts = {});

Objective loss_objective(const ModelContext& ctx, const SourceSide& src, Batch batch, ForwardOptions opts = {});

double log_likelihood(const ParamSet& params, const ModelContext& ctx, const SourceSide& src, const Batch& batch);

// Greedy decoding; stops at eos (not returned) or after max_steps tokens.
// Ties go to the lowest token id.
std::vector<int> greedy_decode(const ParamSet& params, const ModelContext& ctx, const SourceSide& src,
                               const std::vector<int>& source, std::size_t max_steps);
std::vector<std::vector<int>> greedy_decode_batch(const ParamSet& params, const ModelContext& ctx,
                                                  const SourceSide& src,
                                                  const std::vector<std::vector<int>>& sources,
                                                  std::size_t max_steps);

enum class FinetuneStrategy { all, emb_enc, emb };
FinetuneStrategy parse_strategy(const std::string& s);
const char* strategy_name(FinetuneStrategy s);

NameSet partition_mask(const ParamSet& params, FinetuneStrategy strategy);

// Names updated while adapting to `language`: the strategy's partitions minus
// the meta-only ULR entries, plus that language's delta.
NameSet finetune_trainable(const ParamSet& params, FinetuneStrategy strategy, const std::string& language);

// Names updated by meta, multilingual and transfer training: everything but deltas.
NameSet meta_trainable(const ParamSet& params);

}  // namespace fastadapt
