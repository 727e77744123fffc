#include "lorec/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include <boost/math/distributions/beta.hpp>

#include "lorec/autodiff.hpp"
#include "lorec/errors.hpp"

namespace lorec {

struct PoolAccess {
  static std::vector<double>& xi(WeightPool& p) { return p.xi_; }
  static long& t(WeightPool& p) { return p.t_; }
};

WeightPool::WeightPool(std::vector<std::string> user_ids, double xi_hat)
    : ids_(std::move(user_ids)), xi_(ids_.size(), xi_hat), xi_hat_(xi_hat) {
  if (!std::isfinite(xi_hat)) throw ConfigError("xi_hat must be finite");
  q_ = 1.0 / ad::sigmoid(xi_hat);
}

double WeightPool::xi_sum() const { return std::accumulate(xi_.begin(), xi_.end(), 0.0); }

double adaptive_threshold(std::span<const double> scores) {
  if (scores.empty()) throw DataError("adaptive_threshold: no scores");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

WeightPool compensate(const WeightPool& pool, std::span<const double> scores, double mu_o,
                      CompensationStats* stats) {
  if (scores.size() != pool.size()) throw DataError("compensate: scores do not cover the pool");
  CompensationStats s;
  for (double p : scores) (p > mu_o ? s.above : s.below) += 1;
  WeightPool out = pool;
  if (s.above > 0 && s.below == 0) {
    s.skipped = true;
    std::cerr << "warning: compensation skipped, no user at or below the threshold\n";
  } else {
    const double gain = s.below > 0 ? static_cast<double>(s.above) / static_cast<double>(s.below) : 0.0;
    std::vector<double>& xi = PoolAccess::xi(out);
    for (std::size_t i = 0; i < xi.size(); ++i) {
      if (scores[i] > mu_o) {
        xi[i] -= 1.0;
      } else {
        xi[i] += gain;
      }
    }
    ++PoolAccess::t(out);
  }
  if (stats != nullptr) *stats = s;
  return out;
}

std::vector<double> to_weights(const WeightPool& pool) {
  const double base = ad::sigmoid(pool.xi_hat());
  std::vector<double> w;
  w.reserve(pool.size());
  for (double x : pool.xi()) w.push_back(ad::sigmoid(x) / base);
  return w;
}

WeightSummary summarize_weights(const WeightPool& pool) {
  WeightSummary s;
  const std::vector<double> w = to_weights(pool);
  s.xi_sum = pool.xi_sum();
  if (w.empty()) return s;
  s.mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  s.min = *std::min_element(w.begin(), w.end());
  s.max = *std::max_element(w.begin(), w.end());
  return s;
}

void write_snapshot(const std::filesystem::path& path, const WeightPool& pool,
                    std::span<const double> scores, double mu_o) {
  if (scores.size() != pool.size()) throw DataError("snapshot: scores do not cover the pool");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write snapshot '" + path.string() + "'");
  const std::vector<double> w = to_weights(pool);
  char buf[128];
  out << "user_id\txi\tw\tp\tmu_o\n";
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "\t%.17g\t%.17g\t%.17g\t%.17g\n", pool.xi()[i], w[i], scores[i],
                  mu_o);
    out << pool.user_ids()[i] << buf;
  }
  if (!out) throw DataError("failed writing snapshot '" + path.string() + "'");
}

// --- statistical harness -----------------------------------------------------------

std::size_t SyntheticDistributionSpec::n_fraud() const {
  return static_cast<std::size_t>(std::llround(gamma * static_cast<double>(n_genuine)));
}

void SyntheticDistributionSpec::validate() const {
  if (genuine.a <= 0 || genuine.b <= 0 || fraud.a <= 0 || fraud.b <= 0) {
    throw ConfigError("harness: Beta parameters must be positive");
  }
  if (!(genuine.mean() < fraud.mean())) throw ConfigError("harness: genuine mean must be below fraud mean");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("harness: gamma must lie in [0, 1)");
  if (n_genuine < 1) throw ConfigError("harness: need genuine samples");
}

double fraud_delta_closed_form(double alpha, double beta, double gamma) {
  return (alpha - beta) / (1.0 + gamma - (alpha + gamma * beta));
}

double genuine_delta_closed_form(double alpha, double beta, double gamma) {
  return gamma * (beta - alpha) / (1.0 + gamma - (alpha + gamma * beta));
}

namespace {

double draw_beta(const BetaLaw& law, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(law.a, 1.0), gb(law.b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  if (end <= begin) return 0.0;
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(begin),
                         v.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
         static_cast<double>(end - begin);
}

}  // namespace

HarnessResult separation_harness(const SyntheticDistributionSpec& spec, int updates, int trials,
                                  std::uint64_t seed) {
  spec.validate();
  if (updates < 1 || trials < 1) throw ConfigError("harness: updates and trials must be >= 1");
  const std::size_t n = spec.n_genuine;
  const std::size_t z = spec.n_fraud();
  HarnessResult res;
  std::mt19937_64 rng(seed);
  std::vector<double> all_deltas, all_genuine_deltas;
  double alpha_sum = 0.0, beta_sum = 0.0;
  std::size_t rounds = 0;

  std::vector<std::string> ids(n + z);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
  for (int trial = 0; trial < trials; ++trial) {
    WeightPool pool(ids, spec.xi_hat);
    HarnessTrial tr;
    std::vector<double> p(n + z);
    for (int t = 0; t < updates; ++t) {
      for (std::size_t i = 0; i < n; ++i) p[i] = draw_beta(spec.genuine, rng);
      for (std::size_t i = n; i < n + z; ++i) p[i] = draw_beta(spec.fraud, rng);
      const double mu = adaptive_threshold(p);
      std::size_t a_cnt = 0, b_cnt = 0;
      for (std::size_t i = 0; i < n; ++i) a_cnt += p[i] > mu;
      for (std::size_t i = n; i < n + z; ++i) b_cnt += p[i] > mu;
      const double before_g = mean_of(pool.xi(), 0, n);
      const double before_f = mean_of(pool.xi(), n, n + z);
      const double sum_before = pool.xi_sum();
      pool = compensate(pool, p, mu);
      tr.max_conservation_error =
          std::max(tr.max_conservation_error, std::abs(pool.xi_sum() - sum_before));
      tr.genuine_deltas.push_back(mean_of(pool.xi(), 0, n) - before_g);
      tr.alpha.push_back(static_cast<double>(a_cnt) / static_cast<double>(n));
      alpha_sum += tr.alpha.back();
      all_genuine_deltas.push_back(tr.genuine_deltas.back());
      if (z > 0) {
        tr.fraud_deltas.push_back(mean_of(pool.xi(), n, n + z) - before_f);
        tr.beta.push_back(static_cast<double>(b_cnt) / static_cast<double>(z));
        beta_sum += tr.beta.back();
        all_deltas.push_back(tr.fraud_deltas.back());
      }
      ++rounds;
    }
    tr.genuine_mean_xi = mean_of(pool.xi(), 0, n);
    tr.fraud_mean_xi = z > 0 ? mean_of(pool.xi(), n, n + z) : spec.xi_hat;
    if (z > 0 && tr.fraud_mean_xi < spec.xi_hat && tr.fraud_mean_xi < tr.genuine_mean_xi) {
      ++res.trials_fraud_below;
    }
    res.trials.push_back(std::move(tr));
  }

  res.pooled_alpha = alpha_sum / static_cast<double>(rounds);
  res.mean_genuine_delta = mean_of(all_genuine_deltas, 0, all_genuine_deltas.size());
  if (!all_deltas.empty()) {
    res.pooled_beta = beta_sum / static_cast<double>(rounds);
    res.mean_fraud_delta = mean_of(all_deltas, 0, all_deltas.size());
    double ss = 0.0;
    for (double d : all_deltas) ss += (d - res.mean_fraud_delta) * (d - res.mean_fraud_delta);
    const double m = static_cast<double>(all_deltas.size());
    res.fraud_delta_se = m > 1 ? std::sqrt(ss / (m - 1.0) / m) : 0.0;
    res.closed_form_delta = fraud_delta_closed_form(res.pooled_alpha, res.pooled_beta, spec.gamma);
  }

  const double mu_pop = (spec.genuine.mean() + spec.gamma * spec.fraud.mean()) / (1.0 + spec.gamma);
  const boost::math::beta_distribution<double> gn(spec.genuine.a, spec.genuine.b);
  const boost::math::beta_distribution<double> fr(spec.fraud.a, spec.fraud.b);
  res.population_alpha = boost::math::cdf(boost::math::complement(gn, mu_pop));
  res.population_beta = boost::math::cdf(boost::math::complement(fr, mu_pop));
  res.population_delta = fraud_delta_closed_form(res.population_alpha, res.population_beta, spec.gamma);
  return res;
}

}  // namespace lorec
