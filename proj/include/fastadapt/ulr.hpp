#pragma once

// Universal lexical representation.
//
// A token x of language k is embedded as a convex mixture of M universal
// slots plus a per-language correction:
//
//   score_i  = eps_key[i]^T  A  query_k[x]
//   alpha    = softmax(sign * score / tau)
//   e_k[x]   = sum_i alpha_i eps_u[i] + delta_k[x]
//
// query_k and eps_key are frozen everywhere. eps_u and A are trained only in
// the meta stage; delta_k only during language-specific learning.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fastadapt/autodiff.hpp"
#include "fastadapt/params.hpp"
#include "fastadapt/tensor.hpp"
#include "fastadapt/vocab.hpp"

namespace fastadapt {

inline constexpr double kDefaultTemperature = 0.05;

// `similarity`: alpha_i grows with the key/query score (the default).
// `literal`: alpha_i proportional to exp(-score / tau).
enum class SimilaritySign { similarity, literal };

SimilaritySign parse_similarity_sign(const std::string& s);
const char* similarity_sign_name(SimilaritySign s);

struct UlrState {
  Tensor eps_u;      // [M, d]
  Tensor eps_key;    // [M, d]
  Tensor transform;  // [d, d]
  double tau = kDefaultTemperature;
  SimilaritySign sign = SimilaritySign::similarity;

  std::size_t slots() const { return eps_u.dim(0); }
  std::size_t dim() const { return eps_u.dim(1); }
  void validate() const;
};

struct LanguageLexicon {
  Tensor query;  // [|V_k|, d]
  Tensor delta;  // [|V_k|, d]

  static LanguageLexicon with_zero_delta(Tensor query);
  std::size_t size() const { return query.dim(0); }
};

std::vector<double> mixture_weights(const UlrState& ulr, const LanguageLexicon& lexicon, int token_id);
std::vector<double> embed(const UlrState& ulr, const LanguageLexicon& lexicon, int token_id);

// Parameter names used for the trainable ULR pieces inside a ParamSet.
inline const std::string kUniversalEmbeddingName = "ulr.eps_u";
inline const std::string kTransformName = "ulr.transform";
std::string delta_name(const std::string& language);
bool is_delta_name(const std::string& name);

enum class Stage { meta, language_specific };

struct StageAssignment {
  NameSet trainable;
  NameSet frozen;
};

// Trainability of the ULR entries of `params`: in the meta stage eps_u and A
// train and every delta is frozen; in the language-specific stage only the
// active language's delta trains.
StageAssignment set_stage(const ParamSet& params, Stage stage, const std::string& active_language = {});

// Frozen pieces that every parameter state shares.
struct UlrFrozen {
  Tensor eps_key;
  double tau = kDefaultTemperature;
  SimilaritySign sign = SimilaritySign::similarity;
};

// Differentiable [|V_k|, d] table of e_k[x] for every token of a language.
Var embedding_table(Graph& g, const VarMap& params, const UlrFrozen& ulr, const Tensor& query,
                    const std::string& language);

UlrState ulr_state(const ParamSet& params, const UlrFrozen& frozen);

// Plain-text aligned embeddings: header "count dim", then "token v1 ... vdim".
struct EmbeddingTable {
  std::vector<std::string> tokens;
  Tensor vectors;  // [count, dim]
};

EmbeddingTable read_embeddings(const std::filesystem::path& path);
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);

// Rows aligned with vocabulary ids; tokens without a vector (including the
// reserved ones) get a zero row, which yields uniform mixture weights.
Tensor query_matrix(const EmbeddingTable& table, const Vocabulary& vocab);

// latent * R^T + noise, with R a random orthogonal matrix whose distance from
// the identity grows with `rotation` (Cayley transform of a skew matrix).
Tensor rotate_with_noise(const Tensor& latent, double rotation, double noise, std::mt19937_64& rng);

}  // namespace fastadapt
