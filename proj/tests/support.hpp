#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "lorec/autodiff.hpp"
#include "lorec/data.hpp"
#include "lorec/seqrec.hpp"

namespace lorec::testing {

// Rank by counting every candidate that beats `item`; no sorting involved.
inline std::size_t brute_rank(const std::vector<double>& scores, const std::set<ItemIndex>& excluded,
                              ItemIndex item, const std::vector<std::string>& ids) {
  std::size_t better = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const auto v = static_cast<ItemIndex>(j);
    if (v == item || excluded.count(v)) continue;
    const double a = scores[j], b = scores[static_cast<std::size_t>(item)];
    if (a > b || (a == b && ids[j] < ids[static_cast<std::size_t>(item)])) ++better;
  }
  return better + 1;
}

struct OracleUser {
  std::vector<double> scores;
  std::set<ItemIndex> excluded;  // history the ranking skips
  std::set<ItemIndex> seen;      // every interaction, for target eligibility
  ItemIndex test = -1;
};

struct OracleMetrics {
  double hr = 0, ndcg = 0, t_hr = 0, t_ndcg = 0;
};

inline OracleMetrics brute_metrics(const std::vector<OracleUser>& users,
                                   const std::vector<ItemIndex>& targets,
                                   const std::vector<std::string>& ids, std::size_t k_rec,
                                   std::size_t k_tar) {
  OracleMetrics m;
  for (const auto& u : users) {
    if (u.excluded.count(u.test)) continue;
    const std::size_t r = brute_rank(u.scores, u.excluded, u.test, ids);
    if (r <= k_rec) {
      m.hr += 1;
      m.ndcg += 1 / std::log2(r + 1.0);
    }
  }
  m.hr /= static_cast<double>(users.size());
  m.ndcg /= static_cast<double>(users.size());
  std::size_t counted = 0;
  for (ItemIndex t : targets) {
    double hits = 0, gain = 0, eligible = 0;
    for (const auto& u : users) {
      if (u.seen.count(t)) continue;
      eligible += 1;
      if (u.excluded.count(t)) continue;
      const std::size_t r = brute_rank(u.scores, u.excluded, t, ids);
      if (r <= k_tar) {
        hits += 1;
        gain += 1 / std::log2(r + 1.0);
      }
    }
    if (eligible == 0) continue;
    m.t_hr += hits / eligible;
    m.t_ndcg += gain / eligible;
    ++counted;
  }
  if (counted > 0) {
    m.t_hr /= static_cast<double>(counted);
    m.t_ndcg /= static_cast<double>(counted);
  }
  return m;
}

// Catalog whose id order differs from index order, so tie-breaks are visible.
inline ItemCatalog shuffled_catalog(int n_items, std::mt19937_64& rng) {
  std::vector<int> names(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) names[static_cast<std::size_t>(i)] = i;
  std::shuffle(names.begin(), names.end(), rng);
  std::vector<ItemRecord> items;
  for (int i = 0; i < n_items; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "it%03d", names[static_cast<std::size_t>(i)]);
    items.push_back({id, std::string("Title ") + id, "Cat", 0});
  }
  return ItemCatalog(std::move(items));
}

inline InteractionDataset random_dataset(int n_users, int n_items, int min_len, int max_len,
                                         std::mt19937_64& rng, bool repeats = false) {
  std::vector<UserRecord> users;
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<int> item(0, n_items - 1);
  for (int u = 0; u < n_users; ++u) {
    UserRecord r;
    r.user_id = "u" + std::to_string(u);
    const int n = len(rng);
    std::set<int> used;
    while (static_cast<int>(r.items.size()) < n) {
      const int v = item(rng);
      if (!repeats && !used.insert(v).second) continue;
      r.items.push_back(v);
    }
    users.push_back(std::move(r));
  }
  return InteractionDataset(std::move(users), "item recommendation");
}

inline std::vector<double> to_std(const ad::Vector& v) { return {v.data(), v.data() + v.size()}; }

// Max over parameter points of ||analytic - central FD|| / max(||analytic||, ||FD||).
struct GradCheck {
  double max_rel = 0.0;
  std::size_t coords = 0;
};

inline GradCheck gradient_check(const std::vector<ad::Param*>& params,
                                const std::function<double()>& value,
                                const std::function<void()>& analytic, double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  analytic();
  double num2 = 0, diff2 = 0, ana2 = 0;
  GradCheck out;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double x0 = x;
      x = x0 + h;
      const double up = value();
      x = x0 - h;
      const double down = value();
      x = x0;
      const double fd = (up - down) / (2 * h);
      const double a = p->grad.data()[i];
      num2 += fd * fd;
      ana2 += a * a;
      diff2 += (a - fd) * (a - fd);
      ++out.coords;
    }
  }
  const double scale = std::max({std::sqrt(num2), std::sqrt(ana2), 1e-12});
  out.max_rel = std::sqrt(diff2) / scale;
  return out;
}

}  // namespace lorec::testing
