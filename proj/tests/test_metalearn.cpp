#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fastadapt/metalearn.hpp"
#include "model_fixture.hpp"

using namespace fastadapt;

namespace {

ParamSet vec_params(std::vector<double> w) {
  ParamSet p;
  std::size_t n = w.size();
  p.add("w", Tensor({n}, std::move(w)), Partition::encoder);
  return p;
}

// 0.5 (w - a)^T H (w - a) + (c / 6) sum(w^3)
Objective poly_loss(std::vector<double> a, Tensor h, double c = 0.0) {
  return [a, h, c](Graph& g, const VarMap& v) {
    Var w = v.at("w");
    std::size_t n = a.size();
    Var d = sub(w, g.constant(Tensor({n}, a)));
    Var hd = reshape(matmul(reshape(d, {1, n}), g.constant(h)), {n});
    Var total = scale(sum(mul(d, hd)), 0.5);
    if (c != 0.0) total = add(total, scale(sum(mul(w, mul(w, w))), c / 6.0));
    return total;
  };
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, v);
}

std::vector<double> matvec(const Tensor& h, const std::vector<double>& x) {
  std::size_t n = x.size();
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i] += h[i * n + j] * x[j];
  }
  return y;
}

double max_diff(const Tensor& t, const std::vector<double>& v) {
  double m = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) m = std::max(m, std::abs(t[i] - v[i]));
  return m;
}

double rel_diff(const GradMap& a, const GradMap& b) { return distance(a, b) / norm(b); }

const NameSet kW{"w"};

}  // namespace

TEST_CASE("estimator names round-trip") {
  for (auto e : {Estimator::exact, Estimator::hvp, Estimator::first_order}) {
    CHECK(parse_estimator(estimator_name(e)) == e);
  }
  CHECK_THROWS_AS(parse_estimator("second"), std::invalid_argument);
}

TEST_CASE("first-order estimator on quadratics") {
  std::vector<double> theta{1.0, -2.0, 0.5}, a{0.3, 0.1, -0.7}, b{-1.0, 2.0, 0.25};
  ParamSet p = vec_params(theta);
  Objective inner = poly_loss(a, identity(3)), outer = poly_loss(b, identity(3));
  SUBCASE("closed form theta' - b") {
    double eta = 0.1;
    MetaGradient mg = meta_gradient_first_order(p, inner, outer, kW, eta);
    std::vector<double> expect(3);
    for (std::size_t i = 0; i < 3; ++i) expect[i] = (theta[i] - eta * (theta[i] - a[i])) - b[i];
    CHECK(max_diff(mg.grad.at("w"), expect) < 1e-15);
  }
  SUBCASE("eta = 0 gives the plain gradient at theta") {
    MetaGradient mg = meta_gradient_first_order(p, inner, outer, kW, 0.0);
    CHECK(mg.grad.at("w").same_values(value_and_grad(outer, p, kW).grad.at("w")));
  }
  SUBCASE("nu is ignored") {
    auto g1 = meta_gradient(Estimator::first_order, p, inner, outer, kW, 0.1, 1e-2, 100).grad;
    auto g2 = meta_gradient(Estimator::first_order, p, inner, outer, kW, 0.1, 7.0, 100).grad;
    CHECK(g1.at("w").same_values(g2.at("w")));
  }
}

TEST_CASE("exact estimator matches (I - eta H) grad outer(theta') on a quadratic") {
  std::vector<double> theta{1.0, -2.0, 0.5}, a{0.3, 0.1, -0.7}, b{-1.0, 2.0, 0.25};
  Tensor h = Tensor::from_rows({{2.0, 0.5, 0.0}, {0.5, 1.0, -0.3}, {0.0, -0.3, 3.0}});
  ParamSet p = vec_params(theta);
  Objective inner = poly_loss(a, h), outer = poly_loss(b, identity(3));
  for (double eta : {0.0, 1e-3, 0.1, 0.4}) {
    std::vector<double> diff(3);
    for (std::size_t i = 0; i < 3; ++i) diff[i] = theta[i] - a[i];
    auto hd = matvec(h, diff);
    std::vector<double> gout(3);
    for (std::size_t i = 0; i < 3; ++i) gout[i] = theta[i] - eta * hd[i] - b[i];
    auto hg = matvec(h, gout);
    std::vector<double> expect(3);
    for (std::size_t i = 0; i < 3; ++i) expect[i] = gout[i] - eta * hg[i];
    MetaGradient mg = meta_gradient_exact(p, inner, outer, kW, eta, 100);
    CHECK(max_diff(mg.grad.at("w"), expect) < 1e-12);
  }
  CHECK_THROWS_AS(meta_gradient_exact(p, inner, outer, kW, 0.1, 2), std::invalid_argument);
}

TEST_CASE("hvp estimator: zero curvature, quadratic exactness, linear error in nu") {
  std::vector<double> theta{0.8, -0.4, 1.2}, a{0.3, 0.1, -0.7}, b{-1.0, 2.0, 0.25};
  ParamSet p = vec_params(theta);
  Objective outer = poly_loss(b, identity(3));
  SUBCASE("constant inner loss equals first order") {
    Objective flat = [](Graph& g, const VarMap& v) { return add(scale(sum(v.at("w")), 0.0), g.constant(Tensor::scalar(2.0))); };
    auto h = meta_gradient_hvp(p, flat, outer, kW, 0.1, 1e-3).grad;
    auto f = meta_gradient_first_order(p, flat, outer, kW, 0.1).grad;
    CHECK(h.at("w").same_values(f.at("w")));
  }
  SUBCASE("eta = 0 gives the plain gradient") {
    Objective inner = poly_loss(a, identity(3), 0.5);
    auto h = meta_gradient_hvp(p, inner, outer, kW, 0.0, 1e-3).grad;
    CHECK(h.at("w").same_values(value_and_grad(outer, p, kW).grad.at("w")));
  }
  SUBCASE("identity Hessian matches the exact gradient") {
    Objective inner = poly_loss(a, identity(3));
    auto h = meta_gradient_hvp(p, inner, outer, kW, 0.1, 1e-4).grad;
    auto e = meta_gradient_exact(p, inner, outer, kW, 0.1, 100).grad;
    CHECK(rel_diff(h, e) < 1e-10);
  }
  SUBCASE("cubic term: error halves with nu") {
    Objective inner = poly_loss(a, identity(3), 0.8);
    auto e = meta_gradient_exact(p, inner, outer, kW, 0.1, 100).grad;
    double prev = 0.0;
    for (double nu : {4e-3, 2e-3, 1e-3, 5e-4}) {
      double err = distance(meta_gradient_hvp(p, inner, outer, kW, 0.1, nu).grad, e);
      if (prev > 0.0) CHECK(prev / err == doctest::Approx(2.0).epsilon(1e-3));
      prev = err;
    }
  }
}

TEST_CASE("estimators on a small translation model") {
  auto m = testutil::tiny_model(testutil::tiny_config(2, 1, 2), 12, 15, 31);
  Task t = testutil::toy_task(m, 12, 32);
  NameSet trainable = meta_trainable(m.params);
  REQUIRE(m.params.parameter_count(trainable) <= 500);
  Batch d(t.train.begin(), t.train.begin() + 4), dp(t.train.begin() + 4, t.train.begin() + 8);
  Objective inner = loss_objective(m.ctx, m.src, d), outer = loss_objective(m.ctx, m.src, dp);

  SUBCASE("hvp error shrinks linearly with nu") {
    auto e = meta_gradient_exact(m.params, inner, outer, trainable, 0.1, 1000).grad;
    std::vector<double> errs;
    for (double nu : {1e-2, 1e-3, 1e-4}) {
      errs.push_back(rel_diff(meta_gradient_hvp(m.params, inner, outer, trainable, 0.1, nu).grad, e));
    }
    MESSAGE("relative errors " << errs[0] << " " << errs[1] << " " << errs[2]);
    CHECK(errs[2] < 0.05);
    CHECK(errs[1] < errs[0]);
    CHECK(errs[2] < errs[1]);
    double c = errs[0] / 1e-2;
    CHECK(errs[1] <= 2.0 * c * 1e-3);
    CHECK(errs[2] <= 2.0 * c * 1e-4);
  }
  SUBCASE("estimators converge as eta shrinks") {
    double prev_fo = 1e300, prev_hvp = 1e300;
    for (double eta : {1e-1, 1e-2, 1e-3}) {
      auto e = meta_gradient_exact(m.params, inner, outer, trainable, eta, 1000).grad;
      auto h = meta_gradient_hvp(m.params, inner, outer, trainable, eta, 1e-5).grad;
      auto f = meta_gradient_first_order(m.params, inner, outer, trainable, eta).grad;
      double dfo = rel_diff(f, e), dh = rel_diff(h, e);
      CHECK(dfo < prev_fo);
      CHECK(dh < prev_hvp);
      prev_fo = dfo;
      prev_hvp = dh;
    }
    CHECK(prev_fo < 0.1);
  }
  SUBCASE("the exact estimator respects the parameter limit") {
    CHECK_THROWS_WITH_AS(meta_gradient_exact(m.params, inner, outer, trainable, 0.1, 10),
                         doctest::Contains("hvp"), std::invalid_argument);
  }
}

TEST_CASE("episode sampling") {
  auto m = testutil::tiny_model(testutil::tiny_config(), 12, 18, 41);
  std::vector<Task> tasks;
  for (std::uint64_t k = 0; k < 4; ++k) {
    tasks.push_back(testutil::toy_task(m, 40, 100 + k));
    tasks.back().name = "task" + std::to_string(k);
  }
  std::vector<const Task*> ptrs;
  for (const auto& t : tasks) ptrs.push_back(&t);
  MetaConfig cfg;
  cfg.d_tokens = 20;
  cfg.dprime_tokens = 30;

  SUBCASE("a single task is always chosen") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) CHECK(sample_episode({ptrs[2]}, rng, cfg).task == 0);
  }
  SUBCASE("task frequencies are uniform") {
    std::mt19937_64 rng(2);
    std::vector<int> counts(4, 0);
    for (int i = 0; i < 10000; ++i) ++counts[sample_task(4, rng)];
    double sigma = std::sqrt(10000 * 0.25 * 0.75);
    for (int c : counts) CHECK(std::abs(c - 2500.0) < 3 * sigma);
  }
  SUBCASE("budgets, independence and determinism") {
    std::mt19937_64 r1(3), r2(3);
    for (int i = 0; i < 30; ++i) {
      Episode a = sample_episode(ptrs, r1, cfg), b = sample_episode(ptrs, r2, cfg);
      CHECK(a.task == b.task);
      REQUIRE(a.d.size() == b.d.size());
      for (std::size_t j = 0; j < a.d.size(); ++j) CHECK(a.d[j].source == b.d[j].source);
      CHECK(target_tokens(a.d) >= 20);
      CHECK(target_tokens(a.dprime) >= 30);
      // The last pair is what crosses the budget.
      CHECK(target_tokens(a.d) - target_tokens(a.d.back()) < 20);
    }
  }
  SUBCASE("no repeats within a subset") {
    Task t = testutil::toy_task(m, 400, 7);
    // Tag every pair so duplicates are detectable.
    for (std::size_t i = 0; i < t.train.size(); ++i) t.train[i].source.push_back(static_cast<int>(i));
    std::mt19937_64 rng(4);
    Batch s = sample_subset(t.train, 400, rng, t.name);
    std::set<int> tags;
    for (const auto& p : s) tags.insert(p.source.back());
    CHECK(tags.size() == s.size());
  }
  SUBCASE("a small split is sampled with replacement") {
    Batch tiny(ptrs[0]->train.begin(), ptrs[0]->train.begin() + 2);
    std::mt19937_64 rng(5);
    Batch s = sample_subset(tiny, 100, rng, "tiny");
    CHECK(target_tokens(s) >= 100);
    CHECK(s.size() > 2);
  }
}

namespace {

struct MetaFixture {
  testutil::TinyModel m = testutil::tiny_model(testutil::tiny_config(), 12, 18, 51);
  Task a = testutil::toy_task(m, 40, 52);
  Task b = testutil::toy_task(m, 40, 53);
  MetaConfig cfg;

  MetaFixture() {
    b.name = "other-en";
    cfg.meta_lr = 0.05;
    cfg.inner_lr = 0.05;
    cfg.d_tokens = 24;
    cfg.dprime_tokens = 24;
    cfg.total_updates = 6;
    cfg.dropout = false;
    cfg.seed = 9;
  }
  std::vector<const Task*> sources() const { return {&a, &b}; }
};

}  // namespace

TEST_CASE_FIXTURE(MetaFixture, "zero outer updates return the initialization") {
  cfg.total_updates = 0;
  auto r = meta_train(m.params, m.ctx, sources(), cfg);
  CHECK(r.params.bit_identical(m.params));
  CHECK(r.log.size() == 1);
}

TEST_CASE_FIXTURE(MetaFixture, "episode gradients are summed") {
  Task one = a;
  one.train = {a.train.front()};
  cfg.total_updates = 1;
  cfg.d_tokens = cfg.dprime_tokens = 1;
  cfg.episodes_per_update = 1;
  auto single = meta_train(m.params, m.ctx, {&one}, cfg);
  cfg.episodes_per_update = 2;
  auto doubled = meta_train(m.params, m.ctx, {&one}, cfg);
  cfg.mean_over_episodes = true;
  auto averaged = meta_train(m.params, m.ctx, {&one}, cfg);
  for (const auto& name : m.params.names()) {
    const Tensor& t0 = m.params.at(name);
    for (std::size_t i = 0; i < t0.size(); ++i) {
      double s = single.params.at(name)[i] - t0[i];
      double d = doubled.params.at(name)[i] - t0[i];
      CHECK(std::abs(d - 2.0 * s) < 1e-14);  // rounding of theta itself dominates
    }
  }
  CHECK(distance(averaged.params, single.params) < 1e-14);
}

TEST_CASE_FIXTURE(MetaFixture, "deltas stay exactly zero during meta-training") {
  cfg.total_updates = 100;
  cfg.eval_every = 1000;
  for (auto e : {Estimator::first_order, Estimator::hvp, Estimator::exact}) {
    cfg.estimator = e;
    cfg.total_updates = e == Estimator::first_order ? 100 : 5;
    auto r = meta_train(m.params, m.ctx, sources(), cfg);
    const Tensor& delta = r.params.at(delta_name("src"));
    CHECK(delta.same_values(Tensor::zeros(delta.shape())));
    CHECK_FALSE(r.params.bit_identical(m.params));
  }
}

TEST_CASE_FIXTURE(MetaFixture, "meta-training is reproducible and lowers the episode loss") {
  cfg.total_updates = 40;
  cfg.dropout = true;
  auto r1 = meta_train(m.params, m.ctx, sources(), cfg);
  auto r2 = meta_train(m.params, m.ctx, sources(), cfg);
  CHECK(r1.params.bit_identical(r2.params));
  REQUIRE(r1.log.size() == 41);
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].update == i);
    if (i > 0) CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
  }
  double early = 0.0, late = 0.0;
  for (std::size_t i = 1; i <= 10; ++i) {
    early += r1.log[i].train_loss;
    late += r1.log[30 + i].train_loss;
  }
  CHECK(late < early);
}

TEST_CASE_FIXTURE(MetaFixture, "divergence aborts with a numerical error") {
  cfg.divergence_loss = 1e-3;
  std::vector<MetaRecord> seen;
  CHECK_THROWS_AS(meta_train(m.params, m.ctx, sources(), cfg, {}, [&](const MetaRecord& r) { seen.push_back(r); }),
                  NumericalError);
  REQUIRE(seen.size() == 2);
  CHECK(seen.back().update == 1);
}

TEST_CASE_FIXTURE(MetaFixture, "the best validation snapshot is returned") {
  cfg.total_updates = 4;
  cfg.eval_every = 2;
  std::vector<double> scores{1.0, 5.0, 3.0};
  std::size_t calls = 0;
  Validator v = [&](const ParamSet&) { return ValidationScore{scores.at(calls++), 0.0}; };
  auto r = meta_train(m.params, m.ctx, sources(), cfg, v);
  CHECK(calls == 3);
  CHECK(r.best_update == 2);
  CHECK(r.best_bleu == 5.0);
  cfg.total_updates = 2;
  auto two = meta_train(m.params, m.ctx, sources(), cfg);
  CHECK(r.params.bit_identical(two.params));
  CHECK(std::isnan(r.log[1].val_bleu));
  CHECK(r.log[2].val_bleu == 5.0);
}

TEST_CASE_FIXTURE(MetaFixture, "multilingual and transfer baselines") {
  cfg.total_updates = 5;
  auto t1 = transfer_init(m.params, m.ctx, a, cfg);
  auto m1 = multilingual_train(m.params, m.ctx, {&a}, cfg);
  CHECK(t1.params.bit_identical(m1.params));
  auto meta = meta_train(m.params, m.ctx, {&a}, cfg);
  CHECK(distance(meta.params, t1.params) > 0.0);
  auto joint = multilingual_train(m.params, m.ctx, sources(), cfg);
  const Tensor& delta = joint.params.at(delta_name("src"));
  CHECK(delta.same_values(Tensor::zeros(delta.shape())));
  CHECK(joint.log.size() == 6);
}

TEST_CASE_FIXTURE(MetaFixture, "fine-tune validator scores the dev split") {
  ValidationSetup setup;
  setup.learn.max_steps = 3;
  setup.learn.batch_tokens = 32;
  setup.train_tokens = 60;
  setup.max_sentences = 5;
  Validator v = finetune_validator(m.ctx, a, setup);
  ValidationScore s1 = v(m.params), s2 = v(m.params);
  CHECK(s1.bleu >= 0.0);
  CHECK(s1.bleu <= 100.0);
  CHECK(s1.loss > 0.0);
  CHECK(s1.bleu == s2.bleu);
  CHECK(s1.loss == s2.loss);
}

TEST_CASE("invalid meta configurations are rejected") {
  MetaConfig c;
  c.meta_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.episodes_per_update = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.estimator = Estimator::hvp;
  c.nu = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.estimator = Estimator::first_order;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto m = testutil::tiny_model(testutil::tiny_config(), 12, 18, 61);
  testutil::TempDir dir("ckpt");
  Checkpoint ck{m.params, m.ctx, "seed = 3"};
  save_checkpoint(dir / "a.ckpt", ck);
  CHECK_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
  Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.params.bit_identical(m.params));
  for (const auto& name : m.params.names()) CHECK(back.params.partition(name) == m.params.partition(name));
  CHECK(back.context.ulr.eps_key.same_values(m.ctx.ulr.eps_key));
  CHECK(back.context.target_vocab == m.ctx.target_vocab);
  CHECK(config_hash(back.context.config) == config_hash(m.ctx.config));
  CHECK(back.note == "seed = 3");

  SUBCASE("truncation is detected") {
    auto size = std::filesystem::file_size(dir / "a.ckpt");
    std::filesystem::resize_file(dir / "a.ckpt", size - 5);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "a.ckpt"), doctest::Contains("truncated"), std::runtime_error);
  }
  SUBCASE("foreign files are rejected") {
    std::ofstream(dir / "b.ckpt") << "hello world, not a checkpoint";
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "b.ckpt"), doctest::Contains("not a checkpoint"), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  }
  SUBCASE("config hashes separate configurations") {
    ModelConfig other = m.ctx.config;
    other.dropout = 0.25;
    CHECK(config_hash(other) != config_hash(m.ctx.config));
  }
}
