#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lorec {

// Per-user weight coefficients, aligned with a fixed list of user ids.
class WeightPool {
 public:
  WeightPool() = default;
  WeightPool(std::vector<std::string> user_ids, double xi_hat = 5.0);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& user_ids() const { return ids_; }
  const std::vector<double>& xi() const { return xi_; }
  double xi_hat() const { return xi_hat_; }
  double q() const { return q_; }
  long updates() const { return t_; }
  double xi_sum() const;

  friend struct PoolAccess;

 private:
  std::vector<std::string> ids_;
  std::vector<double> xi_;
  double xi_hat_ = 5.0;
  double q_ = 1.0;
  long t_ = 0;
};

double adaptive_threshold(std::span<const double> scores);

struct CompensationStats {
  std::size_t above = 0;
  std::size_t below = 0;
  bool skipped = false;  // nobody at or below the threshold
};

// Users strictly above mu_o lose 1; the rest share the total loss equally.
WeightPool compensate(const WeightPool& pool, std::span<const double> scores, double mu_o,
                      CompensationStats* stats = nullptr);

// w_u = sigma(xi_u) / sigma(xi_hat), aligned with pool.user_ids().
std::vector<double> to_weights(const WeightPool& pool);

struct WeightSummary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double xi_sum = 0.0;
};
WeightSummary summarize_weights(const WeightPool& pool);

// TSV with header user_id, xi, w, p, mu_o.
void write_snapshot(const std::filesystem::path& path, const WeightPool& pool,
                    std::span<const double> scores, double mu_o);

struct BetaLaw {
  double a = 2.0;
  double b = 8.0;
  double mean() const { return a / (a + b); }
};

struct SyntheticDistributionSpec {
  BetaLaw genuine{2.0, 8.0};
  BetaLaw fraud{8.0, 2.0};
  double gamma = 0.05;  // fraud-to-genuine ratio
  std::size_t n_genuine = 2000;
  double xi_hat = 5.0;

  std::size_t n_fraud() const;
  void validate() const;
};

struct HarnessTrial {
  double genuine_mean_xi = 0.0;
  double fraud_mean_xi = 0.0;
  std::vector<double> fraud_deltas;    // per round
  std::vector<double> genuine_deltas;  // per round
  std::vector<double> alpha;           // per round, share of genuine above mu_o
  std::vector<double> beta;            // per round, share of fraud above mu_o
  double max_conservation_error = 0.0;
};

struct HarnessResult {
  std::vector<HarnessTrial> trials;
  std::size_t trials_fraud_below = 0;  // fraud mean below xi_hat and genuine mean
  double mean_fraud_delta = 0.0;       // over all rounds and trials
  double fraud_delta_se = 0.0;
  double pooled_alpha = 0.0;
  double pooled_beta = 0.0;
  double closed_form_delta = 0.0;      // from pooled alpha, beta
  double population_alpha = 0.0;       // from the law CDFs at the population threshold
  double population_beta = 0.0;
  double population_delta = 0.0;
  double mean_genuine_delta = 0.0;
};

// Expected per-round change of the fraud mean xi.
double fraud_delta_closed_form(double alpha, double beta, double gamma);
double genuine_delta_closed_form(double alpha, double beta, double gamma);

HarnessResult separation_harness(const SyntheticDistributionSpec& spec, int updates, int trials,
                                  std::uint64_t seed);

}  // namespace lorec
