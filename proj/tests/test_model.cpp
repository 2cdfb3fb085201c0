#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fastadapt/gradcheck.hpp"
#include "fastadapt/optim.hpp"
#include "model_fixture.hpp"

using namespace fastadapt;
using testutil::tiny_config;
using testutil::tiny_model;

namespace {

ParamSet train(ParamSet params, const ModelContext& ctx, const SourceSide& src, const Batch& batch, int steps,
               double lr) {
  Optimizer opt(OptimizerKind::adam, lr);
  NameSet trainable = meta_trainable(params);
  for (int s = 0; s < steps; ++s) opt.step(params, value_and_grad(loss_objective(ctx, src, batch), params, trainable).grad);
  return params;
}

Batch random_batch(std::size_t n, std::size_t src_vocab, std::size_t tgt_vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(1, 6);
  std::uniform_int_distribution<int> sid(Vocabulary::reserved, static_cast<int>(src_vocab) - 1);
  std::uniform_int_distribution<int> tid(Vocabulary::reserved, static_cast<int>(tgt_vocab) - 1);
  Batch b(n);
  for (auto& p : b) {
    p.source.resize(static_cast<std::size_t>(len(rng)));
    p.target.resize(static_cast<std::size_t>(len(rng)));
    for (int& x : p.source) x = sid(rng);
    for (int& x : p.target) x = tid(rng);
  }
  return b;
}

}  // namespace

TEST_CASE("zero output layer gives loss log V") {
  auto cfg = tiny_config();
  cfg.zero_output_layer = true;
  auto m = tiny_model(cfg, 12, 17, 1);
  Batch b{{{4, 5, 6}, {9}}};
  CHECK(log_likelihood(m.params, m.ctx, m.src, b) == doctest::Approx(std::log(17.0)).epsilon(1e-14));
}

TEST_CASE("overfitting a copy task drives the loss below 0.1") {
  auto cfg = tiny_config(16, 2, 8);
  auto m = tiny_model(cfg, 14, 14, 2);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(Vocabulary::reserved, 13), len(2, 5);
  Batch b(8);
  for (auto& p : b) {
    p.source.resize(static_cast<std::size_t>(len(rng)));
    for (int& x : p.source) x = tok(rng);
    p.target = p.source;
  }
  double before = log_likelihood(m.params, m.ctx, m.src, b);
  ParamSet trained = train(m.params, m.ctx, m.src, b, 50, 0.02);
  double after = log_likelihood(trained, m.ctx, m.src, b);
  MESSAGE("copy loss " << before << " -> " << after);
  CHECK(after < 0.1);
}

TEST_CASE("batch loss is the token-weighted mean and permutation invariant") {
  auto m = tiny_model(tiny_config(), 12, 15, 4);
  std::mt19937_64 rng(5);
  Batch b = random_batch(5, 12, 15, rng);
  double joint = log_likelihood(m.params, m.ctx, m.src, b);
  double weighted = 0.0;
  for (const auto& p : b) weighted += static_cast<double>(target_tokens(p)) * log_likelihood(m.params, m.ctx, m.src, {p});
  weighted /= static_cast<double>(target_tokens(b));
  CHECK(std::abs(joint - weighted) < 1e-12);

  for (int trial = 0; trial < 5; ++trial) {
    Batch shuffled = b;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(std::abs(log_likelihood(m.params, m.ctx, m.src, shuffled) - joint) < 1e-12);
  }
}

TEST_CASE("changing a target token never changes earlier predictions") {
  auto m = tiny_model(tiny_config(), 12, 15, 6);
  Batch b{{{4, 7, 9}, {5, 6, 7, 8, 9}}};
  auto logp = [&](const Batch& batch) {
    Graph g;
    g.set_grad_enabled(false);
    return batch_log_probs(g, bind(g, m.params, {}), m.ctx, m.src, batch).value();
  };
  Tensor base = logp(b);
  std::size_t v = 15;
  for (std::size_t t = 0; t < 5; ++t) {
    Batch changed = b;
    changed[0].target[t] = changed[0].target[t] == 10 ? 11 : 10;
    Tensor other = logp(changed);
    // Position i predicts target[i] and reads target[0..i-1].
    for (std::size_t i = 0; i <= t; ++i) {
      for (std::size_t k = 0; k < v; ++k) CHECK(other[i * v + k] == base[i * v + k]);
    }
    bool later_differs = false;
    for (std::size_t k = 0; k < v; ++k) later_differs |= other[(t + 1) * v + k] != base[(t + 1) * v + k];
    CHECK(later_differs);
  }
}

TEST_CASE("padding tokens receive exactly zero gradient") {
  auto m = tiny_model(tiny_config(), 12, 15, 7);
  std::mt19937_64 rng(8);
  Batch b = random_batch(6, 12, 15, rng);
  b[0].source = {4, 5, 6, 7, 8, 9};
  b[1].source = {4};
  b[0].target = {4, 5, 6, 7, 8, 9};
  b[1].target = {4};
  auto vg = value_and_grad(loss_objective(m.ctx, m.src, b), m.params, m.params.name_set());
  std::size_t d = m.ctx.config.d_model;
  const Tensor& src_delta = vg.grad.at(delta_name("src"));
  const Tensor& tgt = vg.grad.at("tgt.embed");
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(src_delta[Vocabulary::pad * d + c] == 0.0);
    CHECK(tgt[Vocabulary::pad * d + c] == 0.0);
  }
}

TEST_CASE("forward passes are repeatable; dropout depends only on its seed") {
  auto cfg = tiny_config();
  cfg.dropout = 0.3;
  auto m = tiny_model(cfg, 12, 15, 9);
  std::mt19937_64 rng(10);
  Batch b = random_batch(4, 12, 15, rng);
  double eval1 = log_likelihood(m.params, m.ctx, m.src, b);
  double eval2 = log_likelihood(m.params, m.ctx, m.src, b);
  CHECK(eval1 == eval2);

  auto run = [&](std::uint64_t seed) {
    return value_and_grad(loss_objective(m.ctx, m.src, b, {true, seed}), m.params, m.params.name_set());
  };
  auto a = run(1), a2 = run(1), c = run(2);
  CHECK(a.value == a2.value);
  for (const auto& [name, t] : a.grad) CHECK(t.same_values(a2.grad.at(name)));
  CHECK(a.value != c.value);
  CHECK(a.value != eval1);
}

TEST_CASE("invalid batches are rejected") {
  auto m = tiny_model(tiny_config(), 12, 15, 11);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {}), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {{{}, {4}}}), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {{{4}, {}}}), std::invalid_argument);
  std::vector<int> longer(11, 4);
  CHECK_THROWS_WITH_AS(log_likelihood(m.params, m.ctx, m.src, {{longer, {4}}}), doctest::Contains("max_len"),
                       std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {{{4}, longer}}), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {{{12}, {4}}}), std::out_of_range);
  CHECK_THROWS_AS(log_likelihood(m.params, m.ctx, m.src, {{{4}, {15}}}), std::out_of_range);
}

TEST_CASE("model gradients match finite differences") {
  auto cfg = tiny_config(4, 2, 4);
  auto m = tiny_model(cfg, 7, 8, 12);
  std::mt19937_64 rng(13);
  Batch b = random_batch(3, 7, 8, rng);
  auto report = grad_check(loss_objective(m.ctx, m.src, b), m.params, 1e-5, 1e-4);
  CHECK_MESSAGE(report.passed, "worst " << report.worst_parameter << " " << report.max_rel_error);
}

TEST_CASE("greedy decoding: empty budget, tie-break, overfit pair") {
  auto cfg = tiny_config();
  cfg.zero_output_layer = true;
  auto m = tiny_model(cfg, 12, 15, 14);
  CHECK(greedy_decode(m.params, m.ctx, m.src, {4, 5}, 0).empty());
  CHECK_THROWS_AS(greedy_decode(m.params, m.ctx, m.src, {4, 5}, 11), std::invalid_argument);

  std::vector<double> bias(15, 0.0);
  bias[9] = bias[6] = 1.0;
  m.params.set("out.b", Tensor({15}, bias));
  CHECK(greedy_decode(m.params, m.ctx, m.src, {4, 5}, 3) == std::vector<int>{6, 6, 6});

  auto fresh = tiny_model(tiny_config(16, 2, 8), 12, 15, 15);
  Batch pair{{{4, 5}, {10, 11}}};
  ParamSet trained = train(fresh.params, fresh.ctx, fresh.src, pair, 40, 0.02);
  CHECK(greedy_decode(trained, fresh.ctx, fresh.src, {4, 5}, 10) == std::vector<int>{10, 11});
}

TEST_CASE("batched decoding matches one-at-a-time decoding") {
  auto m = tiny_model(tiny_config(), 12, 15, 16);
  std::mt19937_64 rng(17);
  Batch b = random_batch(5, 12, 15, rng);
  std::vector<std::vector<int>> sources;
  for (const auto& p : b) sources.push_back(p.source);
  auto batched = greedy_decode_batch(m.params, m.ctx, m.src, sources, 8);
  for (std::size_t i = 0; i < sources.size(); ++i) CHECK(batched[i] == greedy_decode(m.params, m.ctx, m.src, sources[i], 8));
}

TEST_CASE("fine-tuning strategies nest strictly") {
  auto m = tiny_model(tiny_config(), 12, 15, 18);
  NameSet all = partition_mask(m.params, FinetuneStrategy::all);
  NameSet emb_enc = partition_mask(m.params, parse_strategy("emb+enc"));
  NameSet emb = partition_mask(m.params, FinetuneStrategy::emb);
  CHECK(all == m.params.name_set());
  CHECK(emb == m.params.names_in(Partition::embedding));
  CHECK(std::includes(all.begin(), all.end(), emb_enc.begin(), emb_enc.end()));
  CHECK(std::includes(emb_enc.begin(), emb_enc.end(), emb.begin(), emb.end()));
  CHECK(all.size() > emb_enc.size());
  CHECK(emb_enc.size() > emb.size());
  CHECK_THROWS_AS(parse_strategy("dec"), std::invalid_argument);

  NameSet ft = finetune_trainable(m.params, FinetuneStrategy::emb, "src");
  CHECK(ft == NameSet{delta_name("src"), "tgt.embed"});
  NameSet meta = meta_trainable(m.params);
  CHECK(meta.count(kUniversalEmbeddingName) == 1);
  CHECK(meta.count(delta_name("src")) == 0);
}

TEST_CASE("initialisation draws keys from the pivot rows and rejects small pivots") {
  auto cfg = tiny_config(8, 2, 6);
  std::mt19937_64 rng(19);
  Tensor pivot = testutil::random_tensor({12, 8}, rng);
  auto init = init_model(cfg, pivot, 12, {{"src", 9}}, 1);
  for (std::size_t i = 0; i < 6 * 8; ++i) CHECK(init.context.ulr.eps_key[i] == pivot[4 * 8 + i]);
  CHECK(init.params.at(kUniversalEmbeddingName).same_values(init.context.ulr.eps_key));
  CHECK(init.params.at(delta_name("src")).shape() == Shape{9, 8});
  cfg.slots = 9;
  CHECK_THROWS_AS(init_model(cfg, pivot, 12, {}, 1), std::invalid_argument);

  auto again = init_model(tiny_config(8, 2, 6), pivot, 12, {{"src", 9}}, 1);
  CHECK(again.params.bit_identical(init.params));
  ParamSet re = reinitialize_network(init.params, tiny_config(8, 2, 6), 5);
  CHECK(re.bit_identical(init.params, {kUniversalEmbeddingName, kTransformName}));
  CHECK_FALSE(re.bit_identical(init.params, {"out.w"}));
}
