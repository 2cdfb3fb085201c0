#include "fastadapt/ulr.hpp"

#include <Eigen/Dense>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fastadapt {

SimilaritySign parse_similarity_sign(const std::string& s) {
  if (s == "similarity") return SimilaritySign::similarity;
  if (s == "literal") return SimilaritySign::literal;
  throw std::invalid_argument("unknown similarity sign '" + s + "' (expected similarity|literal)");
}

const char* similarity_sign_name(SimilaritySign s) {
  return s == SimilaritySign::similarity ? "similarity" : "literal";
}

void UlrState::validate() const {
  if (eps_u.rank() != 2 || eps_u.dim(0) < 1 || eps_u.dim(1) < 1) {
    throw ShapeError("ulr: eps_u must be [M, d] with M, d >= 1, got " + shape_str(eps_u.shape()));
  }
  if (eps_key.shape() != eps_u.shape()) {
    throw ShapeError("ulr: eps_key " + shape_str(eps_key.shape()) + " must match eps_u " + shape_str(eps_u.shape()));
  }
  if (transform.shape() != Shape{dim(), dim()}) {
    throw ShapeError("ulr: transform must be [d, d], got " + shape_str(transform.shape()));
  }
  if (!(tau > 0.0)) throw std::invalid_argument("ulr: temperature must be positive");
}

LanguageLexicon LanguageLexicon::with_zero_delta(Tensor query) {
  LanguageLexicon lex{query, Tensor::zeros(query.shape())};
  return lex;
}

namespace {

void check_token(const UlrState& ulr, const LanguageLexicon& lexicon, int token_id) {
  ulr.validate();
  if (lexicon.query.rank() != 2 || lexicon.query.dim(1) != ulr.dim()) {
    throw ShapeError("ulr: query matrix " + shape_str(lexicon.query.shape()) + " does not have d = " +
                     std::to_string(ulr.dim()) + " columns");
  }
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= lexicon.size()) {
    throw std::out_of_range("ulr: token id " + std::to_string(token_id) + " outside vocabulary of " +
                            std::to_string(lexicon.size()));
  }
}

}  // namespace

std::vector<double> mixture_weights(const UlrState& ulr, const LanguageLexicon& lexicon, int token_id) {
  check_token(ulr, lexicon, token_id);
  std::size_t m = ulr.slots(), d = ulr.dim();
  const double* q = lexicon.query.ptr() + static_cast<std::size_t>(token_id) * d;
  std::vector<double> aq(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) aq[r] += ulr.transform[r * d + c] * q[c];
  }
  double sign = ulr.sign == SimilaritySign::similarity ? 1.0 : -1.0;
  std::vector<double> logits(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += ulr.eps_key[i * d + c] * aq[c];
    logits[i] = sign * s / ulr.tau;
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
  return logits;
}

std::vector<double> embed(const UlrState& ulr, const LanguageLexicon& lexicon, int token_id) {
  std::vector<double> alpha = mixture_weights(ulr, lexicon, token_id);
  std::size_t d = ulr.dim();
  if (lexicon.delta.shape() != lexicon.query.shape()) {
    throw ShapeError("ulr: delta " + shape_str(lexicon.delta.shape()) + " must match query " +
                     shape_str(lexicon.query.shape()));
  }
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) out[c] += alpha[i] * ulr.eps_u[i * d + c];
  }
  const double* delta = lexicon.delta.ptr() + static_cast<std::size_t>(token_id) * d;
  for (std::size_t c = 0; c < d; ++c) out[c] += delta[c];
  return out;
}

std::string delta_name(const std::string& language) { return "delta." + language; }

bool is_delta_name(const std::string& name) { return name.rfind("delta.", 0) == 0; }

StageAssignment set_stage(const ParamSet& params, Stage stage, const std::string& active_language) {
  StageAssignment out;
  for (const auto& [name, _] : params) {
    bool ulr_core = name == kUniversalEmbeddingName || name == kTransformName;
    if (!ulr_core && !is_delta_name(name)) continue;
    bool train = stage == Stage::meta ? ulr_core : name == delta_name(active_language);
    (train ? out.trainable : out.frozen).insert(name);
  }
  return out;
}

Var embedding_table(Graph& g, const VarMap& params, const UlrFrozen& ulr, const Tensor& query,
                    const std::string& language) {
  Var eps_u = params.at(kUniversalEmbeddingName);
  Var transform = params.at(kTransformName);
  if (query.rank() != 2 || query.dim(1) != eps_u.shape()[1]) {
    throw ShapeError("ulr: query " + shape_str(query.shape()) + " incompatible with eps_u " +
                     shape_str(eps_u.shape()));
  }
  Var q = g.constant(query);
  Var key = g.constant(ulr.eps_key);
  // scores[x, i] = key_i^T A q_x  ==  (Q A^T K^T)[x, i]
  Var scores = matmul(matmul(q, transform, false, true), key, false, true);
  double sign = ulr.sign == SimilaritySign::similarity ? 1.0 : -1.0;
  Var alpha = softmax(scale(scores, sign / ulr.tau));
  Var table = matmul(alpha, eps_u);
  auto it = params.find(delta_name(language));
  if (it != params.end()) table = add(table, it->second);
  return table;
}

UlrState ulr_state(const ParamSet& params, const UlrFrozen& frozen) {
  UlrState s{params.at(kUniversalEmbeddingName), frozen.eps_key, params.at(kTransformName), frozen.tau, frozen.sign};
  s.validate();
  return s;
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("embeddings: cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("embeddings: " + path.string() + " is empty");
  std::istringstream header(line);
  std::size_t count = 0, dim = 0;
  if (!(header >> count >> dim) || dim == 0) {
    throw std::runtime_error("embeddings: " + path.string() + ": malformed header '" + line + "'");
  }
  EmbeddingTable table;
  std::vector<double> values;
  values.reserve(count * dim);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string token;
    row >> token;
    std::size_t got = 0;
    std::string field;
    while (row >> field) {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw std::runtime_error("embeddings: " + path.string() + ":" + std::to_string(lineno) + ": bad number '" +
                                 field + "'");
      }
      values.push_back(v);
      ++got;
    }
    if (got != dim) {
      throw std::runtime_error("embeddings: " + path.string() + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(dim) + " values, found " + std::to_string(got));
    }
    table.tokens.push_back(token);
  }
  if (table.tokens.size() != count) {
    throw std::runtime_error("embeddings: " + path.string() + ": header promises " + std::to_string(count) +
                             " rows, found " + std::to_string(table.tokens.size()));
  }
  table.vectors = Tensor({count, dim}, std::move(values));
  return table;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("embeddings: cannot write " + path.string());
  std::size_t n = table.tokens.size(), d = table.vectors.dim(1);
  out << n << ' ' << d << '\n';
  char buf[32];
  for (std::size_t r = 0; r < n; ++r) {
    out << table.tokens[r];
    for (std::size_t c = 0; c < d; ++c) {
      auto res = std::to_chars(buf, buf + sizeof(buf), table.vectors[r * d + c]);
      out << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

Tensor query_matrix(const EmbeddingTable& table, const Vocabulary& vocab) {
  std::size_t d = table.vectors.dim(1);
  std::vector<double> out(vocab.size() * d, 0.0);
  for (std::size_t r = 0; r < table.tokens.size(); ++r) {
    if (!vocab.contains(table.tokens[r])) continue;
    std::size_t id = static_cast<std::size_t>(vocab.id(table.tokens[r]));
    std::copy_n(table.vectors.ptr() + r * d, d, out.data() + id * d);
  }
  return Tensor({vocab.size(), d}, std::move(out));
}

Tensor rotate_with_noise(const Tensor& latent, double rotation, double noise, std::mt19937_64& rng) {
  std::size_t n = latent.dim(0), d = latent.dim(1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd skew = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      double v = rotation * gauss(rng) / std::sqrt(static_cast<double>(d));
      skew(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      skew(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = -v;
    }
  }
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  Eigen::MatrixXd rot = (eye - skew).partialPivLu().solve(eye + skew);
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      double v = 0.0;
      for (std::size_t k = 0; k < d; ++k) v += rot(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) * latent[r * d + k];
      out[r * d + c] = v + noise * gauss(rng);
    }
  }
  return Tensor({n, d}, std::move(out));
}

}  // namespace fastadapt
