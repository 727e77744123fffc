#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorec/attacks.hpp"
#include "lorec/calibration.hpp"
#include "lorec/data.hpp"
#include "lorec/lct.hpp"
#include "lorec/llm_bridge.hpp"
#include "lorec/seqrec.hpp"

namespace lorec {

inline constexpr int kReportSchemaVersion = 1;

enum class RunMode { kBackbone, kLlm4Dec, kLorec };
std::string_view to_string(RunMode mode);
RunMode parse_run_mode(std::string_view text);

struct DatasetSettings {
  std::string source = "synthetic";  // synthetic | files
  SyntheticSpec synthetic;
  std::filesystem::path catalog;
  std::filesystem::path interactions;
  int min_interactions = 5;
  std::string scenario;  // files only; empty means "item recommendation"
};

struct ModelSettings {
  RecommenderConfig rec;
  double lr = 1e-3;
  int batch_size = 64;
  NegativePolicy negatives = NegativePolicy::kAuto;
  int exact_bound = 4096;
};

struct AttackSettings {
  bool enabled = true;
  AttackKind kind = AttackKind::kBandwagon;
  double budget = 0.01;
  int n_targets = 5;
  std::string target_mode = "unpopular";  // unpopular | popular
  std::vector<std::string> targets;       // explicit ids override target_mode
  LengthPolicy lengths;
  double popular_fraction = 0.1;
};

struct CalibratorSettings {
  double lambda1 = 0.1;
  double lambda2 = 1.0;
  double xi_hat = 5.0;
  EntropyForm entropy_form = EntropyForm::kIntent;
  double lr = 1e-3;
  int batch_size = 64;
  int hidden = 64;
  double collapse_floor = 1e-8;
};

struct Llm4DecSettings {
  double lambda = 0.1;
  std::string filter = "soft";  // soft | hard
  double quantile = 0.9;        // hard: users above this score quantile are dropped
  int epochs = 5;
  double lr = 1e-3;
};

struct ScheduleSettings {
  int rounds = 4;
  int rec_epochs = 5;
  int lct_epochs = 1;
  int final_rec_epochs = 0;  // recommender epochs after the last weight update
  bool lct_reset = false;    // fresh calibrator parameters every round
};

struct MetricSettings {
  int k_rec = 10;
  int k_target = 50;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  RunMode mode = RunMode::kLorec;
  std::filesystem::path output_dir = "runs/default";
  DatasetSettings dataset;
  int max_len = 50;
  ModelSettings model;
  AttackSettings attack;
  SupervisedConfig supervised;
  ProviderConfig provider;
  std::size_t prompt_items = 50;
  CalibratorSettings calibrator;
  Llm4DecSettings llm4dec;
  ScheduleSettings schedule;
  MetricSettings metrics;

  void validate() const;
};

// Throws ConfigError on unknown keys, wrong types or invalid values.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);
// SHA-256 of the canonical JSON form.
std::string config_digest(const ExperimentConfig& cfg);

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

struct TargetMetrics {
  double hr = 0.0;
  double ndcg = 0.0;
};

// Eligible users for a target are those whose `interactions` never contain it.
// `topk` holds each user's ranked list (best first).
TargetMetrics target_metrics(std::span<const std::vector<ItemIndex>> topk,
                             std::span<const std::vector<ItemIndex>> interactions,
                             std::span<const ItemIndex> targets, std::size_t k);

struct EvaluationResult {
  TopkMetrics rec;
  TargetMetrics target;
};

// HR/NDCG@k_rec and T-HR/T-NDCG@k_target over genuine users of `split`;
// `full` supplies each user's complete interaction list for eligibility.
EvaluationResult evaluate_all(const RecommenderState& state, const DataSplit& split,
                              const InteractionDataset& full, const ItemCatalog& catalog,
                              std::span<const ItemIndex> targets, const MetricSettings& metrics);

// 1 - |attacked - clean| / clean; nullopt when clean is 0.
std::optional<double> consistency(double attacked, double clean);

struct PreparedData {
  ItemCatalog catalog;
  InteractionDataset clean;
  std::vector<ItemIndex> targets;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct CleanReference {
  RecommenderState state;
  EvaluationResult metrics;
};

// Backbone trained on the clean data for the same epoch budget as a run.
CleanReference train_clean_reference(const ExperimentConfig& cfg, const PreparedData& data);

inline constexpr int kHistogramBins = 20;

struct RoundRecord {
  int round = 0;
  double mu_o = 0.0;
  std::size_t above = 0;
  std::size_t below = 0;
  WeightSummary weights;
  double genuine_mean_w = 0.0;
  double fraud_mean_w = 0.0;
  double genuine_mean_p = 0.0;
  double fraud_mean_p = 0.0;
  std::vector<std::size_t> p_histogram;
  CalibratorEpochStats lct;
  double summary_spread = 0.0;
};

struct MetricsReport {
  std::string mode;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<std::string> targets;
  std::size_t n_users = 0;
  std::size_t n_injected = 0;
  std::size_t n_supervised = 0;
  EvaluationResult metrics;
  EvaluationResult clean;
  std::optional<double> rc_hr;
  std::optional<double> rc_ndcg;
  std::vector<RoundRecord> rounds;
  std::vector<std::string> warnings;
  MetricSettings k;
};

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

struct RunArtifacts {
  MetricsReport report;
  RecommenderState state;
  std::optional<CalibratorParams> calibrator;
  WeightPool pool;
  std::vector<double> final_scores;  // aligned with pool users; empty in backbone mode
};

// `clean` may be supplied to reuse a reference across runs of one dataset.
RunArtifacts run_pipeline(const ExperimentConfig& cfg, const PreparedData& data,
                          const CleanReference* clean = nullptr,
                          const std::filesystem::path* snapshot_dir = nullptr);
RunArtifacts run_pipeline(const ExperimentConfig& cfg);

// Writes report.json, weight_trajectory.tsv and plots/*.svg under `dir`.
std::vector<std::filesystem::path> emit_report(const MetricsReport& report,
                                               const std::filesystem::path& dir);

// Full artifact set: emit_report plus checkpoints, config.json and weights.tsv.
std::vector<std::filesystem::path> write_run(const RunArtifacts& run, const ExperimentConfig& cfg,
                                             const std::filesystem::path& dir);

}  // namespace lorec
