#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lorec/errors.hpp"
#include "lorec/experiment.hpp"
#include "support.hpp"

using namespace lorec;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ExperimentConfig smoke_config() {
  return load_config(fs::path(LOREC_SOURCE_DIR) / "configs" / "smoke.json");
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lorec_test_exp_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad values") {
  CHECK_NOTHROW(parse_config(json::object()));
  CHECK_THROWS_AS(parse_config(json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"schedule", {{"roundz", 2}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"mode", "other"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"seed", "seven"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"calibrator", {{"lambda1", -1.0}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"schedule", {{"rounds", 0}}}}), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/lorec.json"), ConfigError);
  CHECK(parse_run_mode("llm4dec") == RunMode::kLlm4Dec);
  CHECK(to_string(RunMode::kBackbone) == "backbone");
}

TEST_CASE("config json round-trip and digest") {
  const ExperimentConfig cfg = smoke_config();
  const json j = to_json(cfg);
  CHECK(to_json(parse_config(j)) == j);
  CHECK(config_digest(parse_config(j)) == config_digest(cfg));
  CHECK(config_digest(cfg).size() == 64);
  ExperimentConfig other = cfg;
  other.seed += 1;
  CHECK(config_digest(other) != config_digest(cfg));
  other = cfg;
  other.output_dir = "elsewhere";
  CHECK(config_digest(other) == config_digest(cfg));
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("target metrics worked example") {
  // Three eligible users, one hit at rank 4.
  const std::vector<std::vector<ItemIndex>> topk{{1, 2, 3, 9}, {1, 2, 3, 4}, {5, 6, 7, 8}, {9}};
  const std::vector<std::vector<ItemIndex>> seen{{0}, {0}, {0}, {9}};
  const std::vector<ItemIndex> targets{9};
  const TargetMetrics m = target_metrics(topk, seen, targets, 50);
  CHECK(m.hr == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(m.ndcg == doctest::Approx((1.0 / 3.0) / std::log2(5.0)).epsilon(1e-15));
  CHECK(target_metrics(topk, seen, targets, 3).hr == 0.0);
  CHECK_THROWS_AS(target_metrics(topk, seen, std::vector<ItemIndex>{}, 5), DataError);
}

TEST_CASE("users who interacted with a target never count for it") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> item(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<ItemIndex>> topk(6), seen(6);
    for (std::size_t u = 0; u < 6; ++u) {
      for (int i = 0; i < 4; ++i) topk[u].push_back(item(rng));
      for (int i = 0; i < 3; ++i) seen[u].push_back(item(rng));
    }
    const std::vector<ItemIndex> targets{static_cast<ItemIndex>(item(rng))};
    const double before = target_metrics(topk, seen, targets, 4).hr;
    // Marking a hit user as having seen the target removes them from numerator and denominator.
    auto seen2 = seen;
    for (std::size_t u = 0; u < 6; ++u) seen2[u].push_back(targets[0]);
    CHECK(target_metrics(topk, seen2, targets, 4).hr == 0.0);
    CHECK(before >= 0.0);
    CHECK(before <= 1.0);
  }
}

TEST_CASE("consistency examples") {
  CHECK(*consistency(0.4, 0.4) == 1.0);
  CHECK(*consistency(0.2, 0.4) == doctest::Approx(0.5));
  CHECK(*consistency(0.8, 0.4) == doctest::Approx(0.0));
  CHECK_FALSE(consistency(0.3, 0.0));
}

TEST_CASE("evaluate_all equals the brute-force oracle") {
  for (int inst = 0; inst < 15; ++inst) {
    std::mt19937_64 rng(100 + inst);
    const int n_items = 20 + inst;
    const ItemCatalog catalog = testing::shuffled_catalog(n_items, rng);
    const InteractionDataset ds = testing::random_dataset(4 + inst, n_items, 3, 9, rng, inst % 2 == 0);
    const DataSplit split = split_leave_one_out(ds, 6);
    RecommenderConfig rc;
    rc.dim = 6;
    rc.max_len = 6;
    rc.backbone = inst % 2 ? BackboneKind::kRecurrent : BackboneKind::kSelfAttention;
    const auto state = RecommenderState::create(rc, n_items, inst);
    std::vector<std::string> ids;
    for (const auto& r : catalog.items()) ids.push_back(r.item_id);
    std::vector<testing::OracleUser> users;
    for (std::size_t u = 0; u < split.users.size(); ++u) {
      testing::OracleUser o;
      const auto hist = evaluation_history(split.users[u], 6);
      o.scores = testing::to_std(state.next_scores(hist));
      o.excluded = {hist.begin(), hist.end()};
      o.seen = {ds.at(u).items.begin(), ds.at(u).items.end()};
      o.test = split.users[u].test;
      users.push_back(o);
    }
    const std::vector<ItemIndex> targets{0, 3, static_cast<ItemIndex>(n_items - 1)};
    MetricSettings ms;
    ms.k_rec = 3;
    ms.k_target = 5;
    const EvaluationResult m = evaluate_all(state, split, ds, catalog, targets, ms);
    const auto o = testing::brute_metrics(users, targets, ids, 3, 5);
    CHECK(std::abs(m.rec.hr - o.hr) <= 1e-12);
    CHECK(std::abs(m.rec.ndcg - o.ndcg) <= 1e-12);
    CHECK(std::abs(m.target.hr - o.t_hr) <= 1e-12);
    CHECK(std::abs(m.target.ndcg - o.t_ndcg) <= 1e-12);
  }
}

TEST_CASE("smoke run: report invariants, artifacts and determinism") {
  const ExperimentConfig cfg = smoke_config();
  const PreparedData data = prepare_data(cfg);
  CHECK(data.targets.size() == 5);
  const fs::path dir = scratch_dir("smoke");
  const fs::path snaps = dir / "snapshots";
  const RunArtifacts run = run_pipeline(cfg, data, nullptr, &snaps);
  const MetricsReport& r = run.report;

  CHECK(r.config_digest == config_digest(cfg));
  CHECK(r.mode == "lorec");
  CHECK(r.n_injected == 2);
  CHECK(r.n_users == data.clean.size() + r.n_injected);
  REQUIRE(r.rounds.size() == static_cast<std::size_t>(cfg.schedule.rounds));
  for (const auto& rec : r.rounds) {
    std::size_t total = 0;
    for (std::size_t c : rec.p_histogram) total += c;
    CHECK(rec.p_histogram.size() == static_cast<std::size_t>(kHistogramBins));
    CHECK(total == r.n_users);
    CHECK(rec.above + rec.below == r.n_users);
    CHECK(std::abs(rec.weights.xi_sum - cfg.calibrator.xi_hat * static_cast<double>(r.n_users)) <= 1e-9);
    CHECK(fs::exists(snaps / ("round_0" + std::to_string(rec.round) + ".tsv")));
  }
  CHECK(run.pool.updates() == cfg.schedule.rounds);
  CHECK(run.final_scores.size() == r.n_users);

  // The report survives JSON and the emitted file matches.
  CHECK(to_json(report_from_json(to_json(r))) == to_json(r));
  const auto files = write_run(run, cfg, dir);
  for (const char* name : {"report.json", "weight_trajectory.tsv", "config.json", "recommender.ckpt",
                           "calibrator.ckpt", "weights.tsv"}) {
    CHECK(fs::exists(dir / name));
  }
  CHECK(fs::exists(dir / "plots"));
  std::ifstream in(dir / "report.json");
  CHECK(json::parse(in) == to_json(r));
  CHECK(load_config(dir / "config.json").seed == cfg.seed);
  CHECK(config_digest(load_config(dir / "config.json")) == r.config_digest);

  const RunArtifacts again = run_pipeline(cfg, data);
  CHECK(to_json(again.report).dump() == to_json(r).dump());
}

TEST_CASE("backbone mode keeps every weight at one") {
  ExperimentConfig cfg = smoke_config();
  cfg.mode = RunMode::kBackbone;
  const RunArtifacts run = run_pipeline(cfg);
  CHECK(run.report.rounds.empty());
  CHECK(run.final_scores.empty());
  for (double w : to_weights(run.pool)) CHECK(w == 1.0);
  CHECK(run.report.metrics.rec.users > 0);
}

TEST_CASE("llm4dec mode scores every user once") {
  ExperimentConfig cfg = smoke_config();
  cfg.mode = RunMode::kLlm4Dec;
  cfg.llm4dec.epochs = 2;
  const RunArtifacts run = run_pipeline(cfg);
  REQUIRE(run.report.rounds.size() == 1);
  CHECK(run.final_scores.size() == run.report.n_users);
  for (double p : run.final_scores) CHECK((p > 0.0 && p < 1.0));
}

TEST_CASE("injected users score above genuine users on average") {
  ExperimentConfig cfg = smoke_config();
  double fraud = 0, genuine = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    const RunArtifacts run = run_pipeline(cfg);
    fraud += run.report.rounds.back().fraud_mean_p / 10;
    genuine += run.report.rounds.back().genuine_mean_p / 10;
  }
  MESSAGE("mean p injected " << fraud << " genuine " << genuine);
  CHECK(fraud > genuine);
}

TEST_CASE("clean runs inject nobody and targets are unseen") {
  ExperimentConfig cfg = smoke_config();
  cfg.mode = RunMode::kBackbone;
  cfg.attack.enabled = false;
  const PreparedData data = prepare_data(cfg);
  const auto counts = data.clean.item_counts(data.catalog.size());
  for (ItemIndex t : data.targets) CHECK(counts[static_cast<std::size_t>(t)] == 0);
  const RunArtifacts run = run_pipeline(cfg, data);
  CHECK(run.report.n_injected == 0);
  CHECK(run.report.n_users == data.clean.size());
}
