#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "lorec/autodiff.hpp"
#include "lorec/calibration.hpp"
#include "lorec/errors.hpp"

using namespace lorec;

namespace {

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("u" + std::to_string(i));
  return out;
}

}  // namespace

TEST_CASE("fresh pool maps every user to weight exactly one") {
  for (double xi_hat : {-3.0, 0.0, 1.0, 3.0, 5.0, 20.0}) {
    const WeightPool pool(ids(50), xi_hat);
    CHECK(pool.q() > 1.0);
    for (double w : to_weights(pool)) CHECK(w == 1.0);
    CHECK(pool.updates() == 0);
  }
  CHECK_THROWS_AS(WeightPool(ids(2), INFINITY), ConfigError);
}

TEST_CASE("threshold is the mean score") {
  const std::vector<double> s{0.1, 0.2, 0.6};
  CHECK(adaptive_threshold(s) == doctest::Approx(0.3));
  CHECK_THROWS_AS(adaptive_threshold(std::vector<double>{}), DataError);
}

TEST_CASE("compensation rule on a worked example") {
  const WeightPool pool(ids(4), 5.0);
  const std::vector<double> s{0.9, 0.1, 0.2, 0.8};
  CompensationStats stats;
  const WeightPool next = compensate(pool, s, adaptive_threshold(s), &stats);
  CHECK(stats.above == 2);
  CHECK(stats.below == 2);
  CHECK(next.xi() == std::vector<double>{4.0, 6.0, 6.0, 4.0});
  CHECK(next.updates() == 1);
}

TEST_CASE("uneven split shares the loss equally") {
  const WeightPool pool(ids(4), 5.0);
  const std::vector<double> s{0.9, 0.1, 0.2, 0.3};
  const WeightPool next = compensate(pool, s, 0.5);
  CHECK(next.xi()[0] == 4.0);
  CHECK(next.xi()[1] == doctest::Approx(5.0 + 1.0 / 3.0));
  CHECK(next.xi()[3] == doctest::Approx(5.0 + 1.0 / 3.0));
  CHECK(next.xi_sum() == doctest::Approx(20.0));
}

TEST_CASE("equal scores leave the pool unchanged") {
  const WeightPool pool(ids(5), 5.0);
  const std::vector<double> s(5, 0.4);
  const WeightPool next = compensate(pool, s, adaptive_threshold(s));
  CHECK(next.xi() == pool.xi());
}

TEST_CASE("nobody at or below the threshold skips the update") {
  const WeightPool pool(ids(3), 5.0);
  const std::vector<double> s{0.5, 0.6, 0.7};
  CompensationStats stats;
  const WeightPool next = compensate(pool, s, 0.1, &stats);
  CHECK(stats.skipped);
  CHECK(next.xi() == pool.xi());
  CHECK(next.updates() == 0);
  CHECK_THROWS_AS(compensate(pool, std::vector<double>{0.1}, 0.1), DataError);
}

TEST_CASE("sum of xi is conserved over randomized rounds") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  WeightPool pool(ids(300), 5.0);
  const double initial = pool.xi_sum();
  for (int round = 0; round < 100; ++round) {
    std::vector<double> s(pool.size());
    for (double& p : s) p = u(rng) * u(rng);
    pool = compensate(pool, s, adaptive_threshold(s));
    CHECK(std::abs(pool.xi_sum() - initial) <= 1e-9);
  }
}

TEST_CASE("a user always above threshold is punished every round") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  WeightPool pool(ids(20), 5.0);
  double prev = pool.xi()[0];
  for (int round = 0; round < 30; ++round) {
    std::vector<double> s(20);
    for (double& p : s) p = u(rng);
    s[0] = 0.99;
    pool = compensate(pool, s, adaptive_threshold(s));
    CHECK(pool.xi()[0] < prev);
    prev = pool.xi()[0];
  }
}

TEST_CASE("weight mapping is strictly increasing") {
  WeightPool pool(ids(4), 5.0);
  const std::vector<double> s{0.9, 0.1, 0.5, 0.2};
  for (int r = 0; r < 3; ++r) pool = compensate(pool, s, 0.3);
  const auto w = to_weights(pool);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (pool.xi()[i] < pool.xi()[j]) CHECK(w[i] < w[j]);
    }
  }
  CHECK(w[0] == doctest::Approx(ad::sigmoid(2.0) / ad::sigmoid(5.0)));
  const auto summary = summarize_weights(pool);
  CHECK(summary.min == w[0]);
  CHECK(summary.xi_sum == doctest::Approx(20.0));
}

TEST_CASE("snapshot rows mirror the pool") {
  const WeightPool pool(ids(3), 2.0);
  const auto path = std::filesystem::temp_directory_path() / "lorec_test_snap" / "round_01.tsv";
  write_snapshot(path, pool, std::vector<double>{0.1, 0.2, 0.3}, 0.2);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "user_id\txi\tw\tp\tmu_o");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("closed-form drift") {
  CHECK(fraud_delta_closed_form(0.3, 0.9, 0.05) ==
        doctest::Approx((0.3 - 0.9) / (1.05 - (0.3 + 0.05 * 0.9))));
  CHECK(fraud_delta_closed_form(0.3, 0.9, 0.05) < 0);
  CHECK(genuine_delta_closed_form(0.3, 0.9, 0.05) > 0);
  // The fraud and genuine drifts balance the total.
  const double a = 0.35, b = 0.8, g = 0.1;
  CHECK(fraud_delta_closed_form(a, b, g) * g + genuine_delta_closed_form(a, b, g) == doctest::Approx(0.0));
}

TEST_CASE("harness separates skewed populations") {
  SyntheticDistributionSpec spec;
  spec.n_genuine = 400;
  const HarnessResult r = separation_harness(spec, 10, 5, 3);
  CHECK(r.trials.size() == 5);
  CHECK(r.trials_fraud_below == 5);
  CHECK(r.mean_fraud_delta < 0);
  for (const auto& t : r.trials) CHECK(t.max_conservation_error < 1e-9);
  SyntheticDistributionSpec bad = spec;
  bad.gamma = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
