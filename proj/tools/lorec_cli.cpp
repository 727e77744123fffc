#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lorec/errors.hpp"
#include "lorec/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
};

lorec::ExperimentConfig resolve_config(const GlobalOptions& g) {
  lorec::ExperimentConfig cfg = g.config.empty() ? lorec::parse_config(json::object())
                                                 : lorec::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.mode.empty()) cfg.mode = lorec::parse_run_mode(g.mode);
  if (!g.out.empty()) cfg.output_dir = g.out;
  cfg.validate();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw lorec::DataError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw lorec::DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

json target_json(const lorec::PreparedData& data) {
  json ids = json::array();
  for (lorec::ItemIndex t : data.targets) ids.push_back(data.catalog.id_of(t));
  return ids;
}

std::vector<lorec::ItemIndex> read_targets(const std::string& spec, const lorec::ItemCatalog& catalog) {
  std::vector<std::string> ids;
  if (fs::exists(spec)) {
    std::ifstream in(spec);
    json j;
    try {
      in >> j;
      ids = (j.is_object() ? j.at("targets") : j).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw lorec::ConfigError("targets file '" + spec + "': " + e.what());
    }
  } else {
    std::size_t start = 0;
    while (start <= spec.size()) {
      const std::size_t comma = spec.find(',', start);
      const std::string id = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!id.empty()) ids.push_back(id);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  std::vector<lorec::ItemIndex> out;
  for (const std::string& id : ids) out.push_back(catalog.index_of(id));
  return out;
}

void print_metrics(const lorec::EvaluationResult& m, const lorec::MetricSettings& k) {
  std::printf("HR@%d %.6f  NDCG@%d %.6f  T-HR@%d %.6f  T-NDCG@%d %.6f  (%zu users)\n", k.k_rec,
              m.rec.hr, k.k_rec, m.rec.ndcg, k.k_target, m.target.hr, k.k_target, m.target.ndcg,
              m.rec.users);
}

int cmd_synth(const GlobalOptions& g) {
  lorec::ExperimentConfig cfg = resolve_config(g);
  cfg.dataset.source = "synthetic";
  const lorec::PreparedData data = lorec::prepare_data(cfg);
  ensure_dir(cfg.output_dir);
  lorec::write_catalog(cfg.output_dir / "catalog.jsonl", data.catalog);
  lorec::write_interactions(cfg.output_dir / "interactions.jsonl", data.clean, data.catalog);
  write_json(cfg.output_dir / "targets.json", json{{"targets", target_json(data)}});
  std::printf("wrote %zu items and %zu users to %s\n", data.catalog.size(), data.clean.size(),
              cfg.output_dir.string().c_str());
  return 0;
}

int cmd_ingest(const GlobalOptions& g, const std::string& catalog_path,
               const std::string& interactions_path) {
  lorec::ExperimentConfig cfg = resolve_config(g);
  if (!catalog_path.empty()) cfg.dataset.catalog = catalog_path;
  if (!interactions_path.empty()) cfg.dataset.interactions = interactions_path;
  cfg.dataset.source = "files";
  cfg.validate();
  const lorec::PreparedData data = lorec::prepare_data(cfg);
  ensure_dir(cfg.output_dir);
  const std::vector<std::int64_t> counts = data.clean.item_counts(data.catalog.size());
  const lorec::ItemCatalog normalized = data.catalog.with_popularity(counts);
  lorec::write_catalog(cfg.output_dir / "catalog.jsonl", normalized);
  lorec::write_interactions(cfg.output_dir / "interactions.jsonl", data.clean, normalized);
  std::size_t total = 0;
  for (const auto& u : data.clean.users()) total += u.items.size();
  std::printf("ingested %zu items, %zu users (%zu fraudster), %zu interactions\n",
              normalized.size(), data.clean.size(), data.clean.count(lorec::UserLabel::kFraudster),
              total);
  return 0;
}

int cmd_attack(const GlobalOptions& g) {
  const lorec::ExperimentConfig cfg = resolve_config(g);
  const lorec::PreparedData data = lorec::prepare_data(cfg);
  lorec::AttackConfig ac;
  ac.kind = cfg.attack.kind;
  ac.budget_fraction = cfg.attack.budget;
  ac.targets = data.targets;
  ac.seed = lorec::derive_seed(cfg.seed, "attack");
  ac.lengths = cfg.attack.lengths;
  ac.popular_fraction = cfg.attack.popular_fraction;
  std::optional<lorec::CleanReference> surrogate;
  if (ac.kind == lorec::AttackKind::kDp) surrogate = lorec::train_clean_reference(cfg, data);
  const auto profiles =
      lorec::generate_attack(data.clean, data.catalog, ac, surrogate ? &surrogate->state : nullptr);
  const lorec::InteractionDataset poisoned = lorec::inject(data.clean, profiles);
  ensure_dir(cfg.output_dir);
  lorec::write_catalog(cfg.output_dir / "catalog.jsonl", data.catalog);
  lorec::write_interactions(cfg.output_dir / "interactions.jsonl", poisoned, data.catalog);
  write_json(cfg.output_dir / "targets.json",
             json{{"targets", target_json(data)},
                  {"kind", std::string(lorec::to_string(ac.kind))},
                  {"profiles", profiles.size()}});
  std::printf("injected %zu %s profiles into %s\n", profiles.size(),
              std::string(lorec::to_string(ac.kind)).c_str(), cfg.output_dir.string().c_str());
  return 0;
}

int cmd_train(const GlobalOptions& g) {
  const lorec::ExperimentConfig cfg = resolve_config(g);
  const lorec::PreparedData data = lorec::prepare_data(cfg);
  const fs::path snapshots = cfg.output_dir / "snapshots";
  const lorec::RunArtifacts run = lorec::run_pipeline(cfg, data, nullptr, &snapshots);
  lorec::write_run(run, cfg, cfg.output_dir);
  std::printf("mode %s, %zu users, %zu injected\n", run.report.mode.c_str(), run.report.n_users,
              run.report.n_injected);
  std::printf("attacked: ");
  print_metrics(run.report.metrics, cfg.metrics);
  std::printf("clean:    ");
  print_metrics(run.report.clean, cfg.metrics);
  for (const std::string& w : run.report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return 0;
}

int cmd_evaluate(const GlobalOptions& g, std::string checkpoint, const std::string& interactions,
                 const std::string& targets) {
  const lorec::ExperimentConfig cfg = resolve_config(g);
  lorec::PreparedData data = lorec::prepare_data(cfg);
  if (checkpoint.empty()) checkpoint = (cfg.output_dir / "recommender.ckpt").string();
  const lorec::RecommenderState state = lorec::RecommenderState::load(checkpoint);
  if (state.n_items() != static_cast<int>(data.catalog.size())) {
    throw lorec::DataError("checkpoint catalog size does not match the dataset");
  }
  lorec::InteractionDataset ds = data.clean;
  if (!interactions.empty()) {
    ds = lorec::load_interactions(interactions, data.catalog, cfg.dataset.min_interactions,
                                  data.clean.scenario());
  }
  if (!targets.empty()) data.targets = read_targets(targets, data.catalog);
  const lorec::DataSplit split = lorec::split_leave_one_out(ds, cfg.max_len);
  const lorec::EvaluationResult m =
      lorec::evaluate_all(state, split, ds, data.catalog, data.targets, cfg.metrics);
  print_metrics(m, cfg.metrics);
  ensure_dir(cfg.output_dir);
  write_json(cfg.output_dir / "evaluation.json",
             json{{"hr", m.rec.hr},
                  {"ndcg", m.rec.ndcg},
                  {"t_hr", m.target.hr},
                  {"t_ndcg", m.target.ndcg},
                  {"users", m.rec.users},
                  {"k", {{"rec", cfg.metrics.k_rec}, {"target", cfg.metrics.k_target}}},
                  {"targets", target_json(data)}});
  return 0;
}

int cmd_report(const GlobalOptions& g, std::string report_path) {
  const fs::path out = g.out.empty() ? fs::path(".") : fs::path(g.out);
  if (report_path.empty()) report_path = (out / "report.json").string();
  std::ifstream in(report_path);
  if (!in) throw lorec::DataError("cannot open report '" + report_path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw lorec::DataError("report '" + report_path + "' is not valid JSON: " + e.what());
  }
  const lorec::MetricsReport report = lorec::report_from_json(j);
  const auto files = lorec::emit_report(report, out);
  for (const auto& f : files) std::printf("%s\n", f.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential recommender poisoning defense toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed; overrides the config");
  app.add_option("--out", g.out, "Output directory; overrides the config");
  app.add_option("--mode", g.mode, "Pipeline mode")
      ->check(CLI::IsMember({"backbone", "llm4dec", "lorec"}));

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  auto* ingest = app.add_subcommand("ingest", "Validate and normalize a dataset");
  std::string ingest_catalog, ingest_interactions;
  ingest->add_option("--catalog", ingest_catalog, "Catalog JSONL");
  ingest->add_option("--interactions", ingest_interactions, "Interactions JSONL");
  auto* attack = app.add_subcommand("attack", "Inject fraudster profiles into a dataset");
  auto* train = app.add_subcommand("train", "Run the training pipeline and write artifacts");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a recommender checkpoint");
  std::string eval_ckpt, eval_interactions, eval_targets;
  evaluate->add_option("--checkpoint", eval_ckpt, "Recommender checkpoint");
  evaluate->add_option("--interactions", eval_interactions, "Labeled interactions to evaluate on");
  evaluate->add_option("--targets", eval_targets, "Target ids: comma list or targets.json");
  auto* report = app.add_subcommand("report", "Regenerate tables and plots from report.json");
  std::string report_path;
  report->add_option("--report", report_path, "Report file (default <out>/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(g);
    if (ingest->parsed()) return cmd_ingest(g, ingest_catalog, ingest_interactions);
    if (attack->parsed()) return cmd_attack(g);
    if (train->parsed()) return cmd_train(g);
    if (evaluate->parsed()) return cmd_evaluate(g, eval_ckpt, eval_interactions, eval_targets);
    if (report->parsed()) return cmd_report(g, report_path);
  } catch (const lorec::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
