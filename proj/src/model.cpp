#include "fastadapt/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "fastadapt/vocab.hpp"

namespace fastadapt {

namespace {

constexpr double kMaskValue = -1e9;

std::string layer_prefix(const char* stack, std::size_t l) { return std::string(stack) + "." + std::to_string(l) + "."; }

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return Tensor({fan_in, fan_out}, std::move(v));
}

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

void add_attention(ParamSet& p, const std::string& pre, std::size_t d, Partition part, std::mt19937_64& rng) {
  for (const char* m : {"wq", "wk", "wv", "wo"}) p.add(pre + m, xavier(d, d, rng), part);
  for (const char* b : {"bq", "bk", "bv", "bo"}) p.add(pre + b, Tensor::zeros({d}), part);
}

void add_norm(ParamSet& p, const std::string& pre, std::size_t d, Partition part) {
  p.add(pre + "g", Tensor::full({d}, 1.0), part);
  p.add(pre + "b", Tensor::zeros({d}), part);
}

void add_ff(ParamSet& p, const std::string& pre, const ModelConfig& cfg, Partition part, std::mt19937_64& rng) {
  p.add(pre + "w1", xavier(cfg.d_model, cfg.d_ff, rng), part);
  p.add(pre + "b1", Tensor::zeros({cfg.d_ff}), part);
  p.add(pre + "w2", xavier(cfg.d_ff, cfg.d_model, rng), part);
  p.add(pre + "b2", Tensor::zeros({cfg.d_model}), part);
}

void add_network(ParamSet& p, const ModelConfig& cfg, std::size_t target_vocab, std::mt19937_64& rng) {
  std::size_t d = cfg.d_model;
  p.add("tgt.embed", gaussian({target_vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng), Partition::embedding);
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    std::string pre = layer_prefix("enc", l);
    add_attention(p, pre + "attn.", d, Partition::encoder, rng);
    add_norm(p, pre + "ln1.", d, Partition::encoder);
    add_ff(p, pre + "ff.", cfg, Partition::encoder, rng);
    add_norm(p, pre + "ln2.", d, Partition::encoder);
  }
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    std::string pre = layer_prefix("dec", l);
    add_attention(p, pre + "self.", d, Partition::decoder, rng);
    add_norm(p, pre + "ln1.", d, Partition::decoder);
    add_attention(p, pre + "cross.", d, Partition::decoder, rng);
    add_norm(p, pre + "ln2.", d, Partition::decoder);
    add_ff(p, pre + "ff.", cfg, Partition::decoder, rng);
    add_norm(p, pre + "ln3.", d, Partition::decoder);
  }
  if (cfg.zero_output_layer) {
    p.add("out.w", Tensor::zeros({d, target_vocab}), Partition::decoder);
  } else {
    p.add("out.w", xavier(d, target_vocab, rng), Partition::decoder);
  }
  p.add("out.b", Tensor::zeros({target_vocab}), Partition::decoder);
}

Tensor positional_rows(std::size_t batch, std::size_t len, std::size_t d) {
  std::vector<double> v(batch * len * d);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      double x = static_cast<double>(t) / rate;
      double val = i % 2 == 0 ? std::sin(x) : std::cos(x);
      for (std::size_t b = 0; b < batch; ++b) v[(b * len + t) * d + i] = val;
    }
  }
  return Tensor({batch * len, d}, std::move(v));
}

// Additive attention mask [B*H, Tq, Tk]: keys at or beyond key_len[b] are
// masked, plus future keys when `causal`.
Tensor attention_mask(const std::vector<std::size_t>& key_len, std::size_t heads, std::size_t tq, std::size_t tk,
                      bool causal) {
  std::size_t batch = key_len.size();
  std::vector<double> v(batch * heads * tq * tk, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* base = v.data() + (b * heads + h) * tq * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = 0; j < tk; ++j) {
          if (j >= key_len[b] || (causal && j > i)) base[i * tk + j] = kMaskValue;
        }
      }
    }
  }
  return Tensor({batch * heads, tq, tk}, std::move(v));
}

class Network {
 public:
  Network(Graph& g, const VarMap& p, const ModelContext& ctx, const ForwardOptions& opts)
      : g_(g), p_(p), cfg_(ctx.config), ctx_(ctx), opts_(opts) {}

  // Encoder states [B*S, d] for padded source ids.
  Var encode(const SourceSide& src, const std::vector<int>& ids, std::size_t batch, std::size_t len,
             const Var& mask) {
    Var table = embedding_table(g_, p_, ctx_.ulr, src.query, src.language);
    Var x = embed(table, ids, batch, len);
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
      std::string pre = layer_prefix("enc", l);
      x = norm(add(x, drop(attention(pre + "attn.", x, x, batch, len, len, mask))), pre + "ln1.");
      x = norm(add(x, drop(feed_forward(pre + "ff.", x))), pre + "ln2.");
    }
    return x;
  }

  // Log-probabilities [B*T, V] for padded decoder inputs.
  Var decode(const Var& memory, const std::vector<int>& ids, std::size_t batch, std::size_t len,
             std::size_t src_len, const Var& self_mask, const Var& cross_mask) {
    Var x = embed(p_.at("tgt.embed"), ids, batch, len);
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
      std::string pre = layer_prefix("dec", l);
      x = norm(add(x, drop(attention(pre + "self.", x, x, batch, len, len, self_mask))), pre + "ln1.");
      x = norm(add(x, drop(attention(pre + "cross.", x, memory, batch, len, src_len, cross_mask))), pre + "ln2.");
      x = norm(add(x, drop(feed_forward(pre + "ff.", x))), pre + "ln3.");
    }
    Var logits = add(matmul(x, p_.at("out.w")), p_.at("out.b"));
    return log_softmax(logits);
  }

 private:
  Var embed(const Var& table, const std::vector<int>& ids, std::size_t batch, std::size_t len) {
    Var rows = embedding_lookup(table, ids);
    Var x = add(scale(rows, std::sqrt(static_cast<double>(cfg_.d_model))),
                g_.constant(positional_rows(batch, len, cfg_.d_model)));
    return drop(x);
  }

  Var linear(const std::string& w, const std::string& b, const Var& x) {
    return add(matmul(x, p_.at(w)), p_.at(b));
  }

  Var split_heads(const Var& x, std::size_t batch, std::size_t len) {
    std::size_t h = cfg_.n_head, dh = cfg_.d_model / h;
    return reshape(permute(reshape(x, {batch, len, h, dh}), {0, 2, 1, 3}), {batch * h, len, dh});
  }

  Var attention(const std::string& pre, const Var& xq, const Var& xkv, std::size_t batch, std::size_t tq,
                std::size_t tk, const Var& mask) {
    std::size_t h = cfg_.n_head, dh = cfg_.d_model / h;
    Var q = split_heads(linear(pre + "wq", pre + "bq", xq), batch, tq);
    Var k = split_heads(linear(pre + "wk", pre + "bk", xkv), batch, tk);
    Var v = split_heads(linear(pre + "wv", pre + "bv", xkv), batch, tk);
    Var scores = add(scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh))), mask);
    Var ctx = matmul(softmax(scores), v);
    Var merged = reshape(permute(reshape(ctx, {batch, h, tq, dh}), {0, 2, 1, 3}), {batch * tq, cfg_.d_model});
    return linear(pre + "wo", pre + "bo", merged);
  }

  Var feed_forward(const std::string& pre, const Var& x) {
    return linear(pre + "w2", pre + "b2", relu(linear(pre + "w1", pre + "b1", x)));
  }

  Var norm(const Var& x, const std::string& pre) {
    return add(mul(layer_norm(x), p_.at(pre + "g")), p_.at(pre + "b"));
  }

  Var drop(const Var& x) {
    if (!opts_.train || cfg_.dropout <= 0.0) return x;
    std::uint64_t seed = opts_.dropout_seed * 0x9E3779B97F4A7C15ULL + (++site_);
    return dropout(x, cfg_.dropout, seed);
  }

  Graph& g_;
  const VarMap& p_;
  const ModelConfig& cfg_;
  const ModelContext& ctx_;
  ForwardOptions opts_;
  std::uint64_t site_ = 0;
};

void check_ids(const std::vector<int>& ids, std::size_t vocab, const char* side) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range(std::string("model: ") + side + " token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
}

void check_source(const std::vector<int>& s, const ModelContext& ctx, const SourceSide& src) {
  if (s.empty()) throw std::invalid_argument("model: empty source sentence");
  if (s.size() > ctx.config.max_len) {
    throw std::invalid_argument("model: source length " + std::to_string(s.size()) + " exceeds max_len " +
                                std::to_string(ctx.config.max_len));
  }
  check_ids(s, src.query.dim(0), "source");
}

struct PaddedSource {
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
  std::size_t len = 0;
};

PaddedSource pad_sources(const std::vector<const std::vector<int>*>& sources) {
  PaddedSource out;
  for (const auto* s : sources) out.len = std::max(out.len, s->size());
  out.ids.assign(sources.size() * out.len, Vocabulary::pad);
  for (std::size_t b = 0; b < sources.size(); ++b) {
    std::copy(sources[b]->begin(), sources[b]->end(), out.ids.begin() + static_cast<std::ptrdiff_t>(b * out.len));
    out.lengths.push_back(sources[b]->size());
  }
  return out;
}

struct DecoderInputs {
  std::vector<int> ids;      // bos + target, padded
  std::vector<int> labels;   // target + eos, padded with -1
  std::vector<std::size_t> lengths;
  std::size_t len = 0;
};

DecoderInputs decoder_inputs(const Batch& batch) {
  DecoderInputs out;
  for (const auto& p : batch) out.len = std::max(out.len, p.target.size() + 1);
  out.ids.assign(batch.size() * out.len, Vocabulary::pad);
  out.labels.assign(batch.size() * out.len, -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& t = batch[b].target;
    std::size_t base = b * out.len;
    out.ids[base] = Vocabulary::bos;
    for (std::size_t i = 0; i < t.size(); ++i) {
      out.ids[base + i + 1] = t[i];
      out.labels[base + i] = t[i];
    }
    out.labels[base + t.size()] = Vocabulary::eos;
    out.lengths.push_back(t.size() + 1);
  }
  return out;
}

void check_batch(const ModelContext& ctx, const SourceSide& src, const Batch& batch) {
  ctx.config.validate();
  if (batch.empty()) throw std::invalid_argument("model: empty batch");
  for (const auto& p : batch) {
    check_source(p.source, ctx, src);
    if (p.target.empty()) throw std::invalid_argument("model: empty target sentence");
    if (p.target.size() > ctx.config.max_len) {
      throw std::invalid_argument("model: target length " + std::to_string(p.target.size()) +
                                  " exceeds max_len " + std::to_string(ctx.config.max_len));
    }
    check_ids(p.target, ctx.target_vocab, "target");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_head == 0 || d_model % n_head != 0) {
    throw std::invalid_argument("model: d_model must be a positive multiple of n_head");
  }
  if (d_ff == 0 || max_len == 0) throw std::invalid_argument("model: d_ff and max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must be in [0, 1)");
  if (slots == 0) throw std::invalid_argument("model: slots must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("model: temperature must be positive");
}

std::size_t target_tokens(const SentencePair& p) { return p.target.size() + 1; }

std::size_t target_tokens(const Batch& batch) {
  std::size_t n = 0;
  for (const auto& p : batch) n += target_tokens(p);
  return n;
}

ModelInit init_model(const ModelConfig& cfg, const Tensor& pivot_query, std::size_t target_vocab,
                     const std::vector<LanguageInfo>& languages, std::uint64_t seed) {
  cfg.validate();
  if (pivot_query.rank() != 2 || pivot_query.dim(1) != cfg.d_model) {
    throw ShapeError("init_model: pivot query " + shape_str(pivot_query.shape()) + " must have d_model = " +
                     std::to_string(cfg.d_model) + " columns");
  }
  std::size_t first = static_cast<std::size_t>(Vocabulary::reserved);
  if (pivot_query.dim(0) < first + cfg.slots) {
    throw std::invalid_argument("init_model: pivot vocabulary has " + std::to_string(pivot_query.dim(0) - first) +
                                " tokens, fewer than slots = " + std::to_string(cfg.slots));
  }
  if (target_vocab <= first) throw std::invalid_argument("init_model: target vocabulary holds only reserved tokens");
  std::size_t d = cfg.d_model;
  std::vector<double> key(pivot_query.ptr() + first * d, pivot_query.ptr() + (first + cfg.slots) * d);
  Tensor key_t({cfg.slots, d}, std::move(key));

  ModelInit out;
  out.context.config = cfg;
  out.context.ulr = UlrFrozen{key_t, cfg.tau, cfg.sign};
  out.context.target_vocab = target_vocab;

  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  out.params.add(kUniversalEmbeddingName, key_t, Partition::embedding);
  out.params.add(kTransformName, Tensor({d, d}, std::move(eye)), Partition::embedding);
  for (const auto& lang : languages) {
    out.params.add(delta_name(lang.name), Tensor::zeros({lang.vocab_size, d}), Partition::embedding);
  }
  std::mt19937_64 rng(seed);
  add_network(out.params, cfg, target_vocab, rng);
  return out;
}

ParamSet reinitialize_network(const ParamSet& like, const ModelConfig& cfg, std::uint64_t seed) {
  ParamSet fresh;
  std::mt19937_64 rng(seed);
  add_network(fresh, cfg, like.at("tgt.embed").dim(0), rng);
  ParamSet out = like;
  for (const auto& [name, e] : fresh) out.set(name, e.value);
  return out;
}

Var batch_log_probs(Graph& g, const VarMap& params, const ModelContext& ctx, const SourceSide& src,
                    const Batch& batch, const ForwardOptions& opts) {
  check_batch(ctx, src, batch);
  std::vector<const std::vector<int>*> sources;
  for (const auto& p : batch) sources.push_back(&p.source);
  PaddedSource ps = pad_sources(sources);
  DecoderInputs di = decoder_inputs(batch);
  std::size_t b = batch.size(), h = ctx.config.n_head;

  Network net(g, params, ctx, opts);
  Var enc_mask = g.constant(attention_mask(ps.lengths, h, ps.len, ps.len, false));
  Var memory = net.encode(src, ps.ids, b, ps.len, enc_mask);
  Var self_mask = g.constant(attention_mask(di.lengths, h, di.len, di.len, true));
  Var cross_mask = g.constant(attention_mask(ps.lengths, h, di.len, ps.len, false));
  Var logp = net.decode(memory, di.ids, b, di.len, ps.len, self_mask, cross_mask);
  return reshape(logp, {b, di.len, ctx.target_vocab});
}

Var batch_loss(Graph& g, const VarMap& params, const ModelContext& ctx, const SourceSide& src, const Batch& batch,
               const ForwardOptions& opts) {
  Var logp = batch_log_probs(g, params, ctx, src, batch, opts);
  DecoderInputs di = decoder_inputs(batch);
  std::size_t v = ctx.target_vocab;
  std::vector<double> weights(di.labels.size() * v, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < di.labels.size(); ++i) {
    if (di.labels[i] < 0) continue;
    weights[i * v + static_cast<std::size_t>(di.labels[i])] = 1.0;
    ++n;
  }
  Var w = g.constant(Tensor(logp.shape(), std::move(weights)));
  return scale(sum(mul(logp, w)), -1.0 / static_cast<double>(n));
}

Objective loss_objective(const ModelContext& ctx, const SourceSide& src, Batch batch, ForwardOptions opts) {
  return [&ctx, &src, batch = std::move(batch), opts](Graph& g, const VarMap& p) {
    return batch_loss(g, p, ctx, src, batch, opts);
  };
}

double log_likelihood(const ParamSet& params, const ModelContext& ctx, const SourceSide& src, const Batch& batch) {
  return evaluate(loss_objective(ctx, src, batch), params);
}

std::vector<std::vector<int>> greedy_decode_batch(const ParamSet& params, const ModelContext& ctx,
                                                  const SourceSide& src,
                                                  const std::vector<std::vector<int>>& sources,
                                                  std::size_t max_steps) {
  ctx.config.validate();
  if (max_steps > ctx.config.max_len) {
    throw std::invalid_argument("greedy_decode: max_steps " + std::to_string(max_steps) + " exceeds max_len " +
                                std::to_string(ctx.config.max_len));
  }
  std::vector<std::vector<int>> out(sources.size());
  if (sources.empty() || max_steps == 0) {
    for (const auto& s : sources) check_source(s, ctx, src);
    return out;
  }
  std::vector<const std::vector<int>*> ptrs;
  for (const auto& s : sources) {
    check_source(s, ctx, src);
    ptrs.push_back(&s);
  }
  PaddedSource ps = pad_sources(ptrs);
  std::size_t b = sources.size(), h = ctx.config.n_head, v = ctx.target_vocab;

  Graph g;
  g.set_grad_enabled(false);
  VarMap vars = bind(g, params, {});
  Network net(g, vars, ctx, {});
  Var memory = net.encode(src, ps.ids, b, ps.len, g.constant(attention_mask(ps.lengths, h, ps.len, ps.len, false)));

  std::vector<std::vector<int>> prefix(b, std::vector<int>{Vocabulary::bos});
  std::vector<bool> done(b, false);
  std::size_t active = b;
  for (std::size_t step = 0; step < max_steps && active > 0; ++step) {
    std::size_t len = step + 1;
    std::vector<int> ids;
    ids.reserve(b * len);
    for (const auto& p : prefix) ids.insert(ids.end(), p.begin(), p.end());
    std::vector<std::size_t> dec_len(b, len);
    Var logp = net.decode(memory, ids, b, len, ps.len, g.constant(attention_mask(dec_len, h, len, len, true)),
                          g.constant(attention_mask(ps.lengths, h, len, ps.len, false)));
    Tensor lp = logp.value();
    for (std::size_t i = 0; i < b; ++i) {
      const double* row = lp.ptr() + ((i * len) + step) * v;
      int best = 0;
      for (std::size_t k = 1; k < v; ++k) {
        if (row[k] > row[best]) best = static_cast<int>(k);
      }
      prefix[i].push_back(best);
      if (done[i]) continue;
      if (best == Vocabulary::eos) {
        done[i] = true;
        --active;
      } else {
        out[i].push_back(best);
      }
    }
    // Start the next step on an empty tape, carrying the encoder output over as a constant.
    Tensor mem = memory.value();
    g.reset();
    vars = bind(g, params, {});
    memory = g.constant(mem);
  }
  return out;
}

std::vector<int> greedy_decode(const ParamSet& params, const ModelContext& ctx, const SourceSide& src,
                               const std::vector<int>& source, std::size_t max_steps) {
  return greedy_decode_batch(params, ctx, src, {source}, max_steps)[0];
}

FinetuneStrategy parse_strategy(const std::string& s) {
  if (s == "all") return FinetuneStrategy::all;
  if (s == "emb+enc") return FinetuneStrategy::emb_enc;
  if (s == "emb") return FinetuneStrategy::emb;
  throw std::invalid_argument("unknown fine-tuning strategy '" + s + "' (expected all|emb+enc|emb)");
}

const char* strategy_name(FinetuneStrategy s) {
  switch (s) {
    case FinetuneStrategy::all: return "all";
    case FinetuneStrategy::emb_enc: return "emb+enc";
    case FinetuneStrategy::emb: return "emb";
  }
  return "unknown";
}

NameSet partition_mask(const ParamSet& params, FinetuneStrategy strategy) {
  NameSet out;
  for (const auto& [name, e] : params) {
    bool keep = strategy == FinetuneStrategy::all || e.partition == Partition::embedding ||
                (strategy == FinetuneStrategy::emb_enc && e.partition == Partition::encoder);
    if (keep) out.insert(name);
  }
  return out;
}

NameSet finetune_trainable(const ParamSet& params, FinetuneStrategy strategy, const std::string& language) {
  NameSet out;
  for (const auto& name : partition_mask(params, strategy)) {
    if (name == kUniversalEmbeddingName || name == kTransformName || is_delta_name(name)) continue;
    out.insert(name);
  }
  if (params.contains(delta_name(language))) out.insert(delta_name(language));
  return out;
}

NameSet meta_trainable(const ParamSet& params) {
  NameSet out;
  for (const auto& [name, _] : params) {
    if (!is_delta_name(name)) out.insert(name);
  }
  return out;
}

}  // namespace fastadapt
