#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fastadapt/experiment.hpp"
#include "test_util.hpp"

using namespace fastadapt;

namespace {

ExperimentConfig tiny_experiment(const testutil::TempDir& dir) {
  ExperimentConfig c;
  c.set("d_model", "8");
  c.set("d_ff", "16");
  c.set("max_len", "8");
  c.set("slots", "20");
  c.set("family_sources", "2");
  c.set("family_targets", "1");
  c.set("latent_vocab", "20");
  c.set("vocab_size", "20");
  c.set("min_sentence", "3");
  c.set("max_sentence", "5");
  c.set("source_train", "60");
  c.set("target_train", "60");
  c.set("dev_size", "10");
  c.set("test_size", "12");
  c.set("total_updates", "4");
  c.set("eval_every", "2");
  c.set("d_tokens", "16");
  c.set("dprime_tokens", "16");
  c.set("ft_steps", "6");
  c.set("ft_eval_every", "2");
  c.set("ft_batch_tokens", "32");
  c.set("val_steps", "3");
  c.set("val_tokens", "40");
  c.set("val_sentences", "5");
  c.set("budgets", "100");
  c.family_dir = dir / "family";
  c.output_dir = dir / "out";
  generate_family(c.family, c.family_dir);
  return c;
}

}  // namespace

TEST_CASE("configuration text round-trips through every key") {
  ExperimentConfig a;
  a.set("seeds", "3,4,5");
  a.set("budgets", "4000, 16000");
  a.set("strategies", "all,emb+enc,emb");
  a.set("inits", "meta,random");
  a.set("estimator", "hvp");
  a.set("aggregate", "mean");
  a.set("nu", "2.5e-5");
  a.set("sign", "literal");
  a.set("ft_dropout", "false");
  ExperimentConfig b;
  b.apply_text("# comment\n\n" + a.serialize());
  CHECK(b.serialize() == a.serialize());
  for (const auto& k : ExperimentConfig::keys()) {
    CHECK(a.get(k) == b.get(k));
    CHECK_FALSE(ExperimentConfig::describe(k).empty());
  }
  CHECK(b.meta.estimator == Estimator::hvp);
  CHECK(b.meta.mean_over_episodes);
  CHECK(b.seeds == std::vector<std::uint64_t>{3, 4, 5});
  CHECK(b.budgets == std::vector<std::size_t>{4000, 16000});
  CHECK(b.family.dim == b.model.d_model);
}

TEST_CASE("configuration errors name the key") {
  ExperimentConfig c;
  CHECK_THROWS_AS(c.set("no_such_key", "1"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("seeds", "1,x"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("nu", "small"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("inits", "pretrained"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("mode", "dance"), std::invalid_argument);
  try {
    c.apply_text("seeds = 1\nbogus = 2\n", "run.cfg");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("run.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
  c.budgets.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("output directory falls back to the environment") {
  ExperimentConfig c;
  ::setenv(kOutputRootEnv, "/tmp/fa-out", 1);
  CHECK(c.resolved_output_dir() == "/tmp/fa-out");
  ::unsetenv(kOutputRootEnv);
  CHECK(c.resolved_output_dir() == "runs");
  c.output_dir = "elsewhere";
  CHECK(c.resolved_output_dir() == "elsewhere");
}

TEST_CASE("metrics records round-trip through JSON lines") {
  testutil::TempDir dir("metrics");
  MetricsRecord a{"meta/all", 7, 120, "val-en", "val", 2.5, 31.25, 0, 1.5};
  MetricsRecord b{"random/all", 2, 0, "tgt1-en", "test", std::nan(""), 4.0, 16000, 0.25};
  {
    MetricsLog log(dir / "m.jsonl");
    log.append(a);
    log.append(b);
    CHECK(log.records().size() == 2);
  }
  auto back = MetricsLog::read(dir / "m.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].run == a.run);
  CHECK(back[0].seed == 7);
  CHECK(back[0].step == 120);
  CHECK(back[0].loss == 2.5);
  CHECK(back[0].bleu == 31.25);
  CHECK(std::isnan(back[1].loss));
  CHECK(back[1].budget == 16000);
  CHECK(back[1].split == "test");
  std::ofstream(dir / "bad.jsonl") << "{\"run\": 1}\n";
  CHECK_THROWS(MetricsLog::read(dir / "bad.jsonl"));
}

TEST_CASE("grid cells report sample statistics") {
  GridCell c;
  c.values = {2, 4, 4, 4, 5};
  CHECK(c.mean() == doctest::Approx(3.8));
  CHECK(c.stddev() == doctest::Approx(std::sqrt(4.8 / 4.0)));
  c.values = {7};
  CHECK(c.stddev() == 0.0);
  GridSummary s{{c}};
  CHECK(s.csv().find("random,,0,all,1,7,0,7") != std::string::npos);
  CHECK_THROWS_AS(s.cell(InitKind::meta, "", 0, FinetuneStrategy::all), std::out_of_range);
}

TEST_CASE("a one-cell grid writes its artifacts and reruns identically") {
  testutil::TempDir dir("grid");
  ExperimentConfig c = tiny_experiment(dir);
  c.inits = {InitKind::meta};
  c.reuse_checkpoints = false;
  GridSummary first = run_comparison_grid(c);
  REQUIRE(first.cells.size() == 1);
  CHECK(first.cells[0].values.size() == 1);
  for (const char* f : {"config.txt", "metrics.jsonl", "summary.csv", "summary.txt"}) {
    CHECK(std::filesystem::exists(c.output_dir / f));
  }
  auto recs = MetricsLog::read(c.output_dir / "metrics.jsonl");
  std::size_t val = 0, test = 0;
  for (const auto& r : recs) {
    val += r.split == "val";
    test += r.split == "test";
  }
  CHECK(val == 3);  // updates 0, 2 and 4
  CHECK(test == first.cells[0].values.size());

  c.output_dir = dir / "again";
  GridSummary second = run_comparison_grid(c);
  CHECK(second.cells[0].values == first.cells[0].values);
  ExperimentConfig saved;
  saved.apply_file(dir / "out" / "config.txt");
  saved.output_dir = c.output_dir;
  CHECK(saved.serialize() == c.serialize());
}

TEST_CASE("transfer keeps the best single source per seed") {
  testutil::TempDir dir("transfer");
  ExperimentConfig c = tiny_experiment(dir);
  c.seeds = {1, 2};
  c.inits = {InitKind::transfer};
  MetricsLog log;
  Experiment ex(c, &log);
  std::vector<std::vector<double>> per_source;
  for (const auto& s : ex.source_names()) {
    std::vector<double> v;
    for (auto seed : c.seeds) {
      ParamSet theta = ex.pretrain(InitKind::transfer, {s}, seed).params;
      v.push_back(ex.finetune(theta, ex.target_names()[0], 100, FinetuneStrategy::all, seed, "t").test_bleu);
    }
    per_source.push_back(v);
  }
  GridSummary g = run_comparison_grid(c);
  const auto& cell = g.cells.at(0);
  REQUIRE(cell.values.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(cell.values[i] == std::max(per_source[0][i], per_source[1][i]));
  }
}

TEST_CASE("checkpoints are cached and missing ones are reported") {
  testutil::TempDir dir("ckpt");
  ExperimentConfig c = tiny_experiment(dir);
  Experiment ex(c);
  auto path = ex.checkpoint_path(InitKind::multilingual, ex.source_names(), 3);
  CHECK_FALSE(std::filesystem::exists(path));
  ParamSet trained = ex.pretrain(InitKind::multilingual, ex.source_names(), 3).params;
  CHECK(std::filesystem::exists(path));
  ParamSet cached = ex.pretrain(InitKind::multilingual, ex.source_names(), 3).params;
  CHECK(cached.bit_identical(trained));

  c.pretrain = false;
  Experiment strict(c);
  try {
    strict.pretrain(InitKind::meta, strict.source_names(), 3);
    FAIL("expected a missing-checkpoint error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("meta-all-s3.ckpt") != std::string::npos);
  }
}

TEST_CASE("zero-shot scoring of an untrained model is near zero") {
  testutil::TempDir dir("zero");
  ExperimentConfig c = tiny_experiment(dir);
  c.set("test_size", "40");
  c.set("latent_vocab", "100");
  c.set("vocab_size", "100");
  c.set("slots", "100");
  generate_family(c.family, c.family_dir);
  MetricsLog log;
  Experiment ex(c, &log);
  ParamSet theta = ex.initial(5);
  double b = ex.zero_shot(theta, ex.target_names()[0], 5, "random");
  CHECK(b < 0.5);
  REQUIRE(log.records().size() == 1);
  CHECK(log.records()[0].run == "random/zero");

  Checkpoint ck{theta, ex.context(), ""};
  CHECK(zero_shot_eval(ck, ex.family().task(ex.target_names()[0])) == doctest::Approx(b));
  ck.context.target_vocab += 1;
  CHECK_THROWS_AS(zero_shot_eval(ck, ex.family().task(ex.target_names()[0])), std::invalid_argument);
}

TEST_CASE("experiment rejects a family of the wrong width") {
  testutil::TempDir dir("width");
  ExperimentConfig c = tiny_experiment(dir);
  c.model.d_model = 12;
  CHECK_THROWS_AS(Experiment{c}, std::invalid_argument);
}
