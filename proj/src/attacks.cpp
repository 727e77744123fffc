#include "lorec/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <unordered_set>

#include "lorec/errors.hpp"
#include "lorec/seqrec.hpp"

namespace lorec {

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kRandom: return "random";
    case AttackKind::kBandwagon: return "bandwagon";
    case AttackKind::kDp: return "dp";
  }
  return "random";
}

AttackKind parse_attack_kind(std::string_view text) {
  if (text == "random") return AttackKind::kRandom;
  if (text == "bandwagon") return AttackKind::kBandwagon;
  if (text == "dp") return AttackKind::kDp;
  throw ConfigError("unknown attack kind '" + std::string(text) + "'");
}

SuccessorScorer surrogate_scorer(const RecommenderState& surrogate) {
  return [&surrogate](std::span<const ItemIndex> history) { return surrogate.next_scores(history); };
}

std::size_t profile_count(const InteractionDataset& ds, double budget_fraction) {
  if (!(budget_fraction > 0.0 && budget_fraction < 1.0)) {
    throw ConfigError("attack budget must lie in (0, 1)");
  }
  const auto n = static_cast<std::size_t>(
      std::floor(budget_fraction * static_cast<double>(ds.count(UserLabel::kGenuine)) + 1e-9));
  if (n == 0) throw ConfigError("attack budget buys zero profiles");
  return n;
}

std::vector<ItemIndex> popular_pool(std::span<const std::int64_t> counts, const ItemCatalog& catalog,
                                    std::span<const ItemIndex> targets, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("popular fraction must lie in (0, 1]");
  const std::set<ItemIndex> excluded(targets.begin(), targets.end());
  std::vector<ItemIndex> candidates;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (!excluded.count(static_cast<ItemIndex>(i))) candidates.push_back(static_cast<ItemIndex>(i));
  }
  if (candidates.empty()) throw DataError("bandwagon: no non-target item available");
  std::sort(candidates.begin(), candidates.end(), [&](ItemIndex a, ItemIndex b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return catalog.lex_rank(a) < catalog.lex_rank(b);
  });
  const auto size = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(catalog.size()) + 1e-9)));
  candidates.resize(std::min(size, candidates.size()));
  return candidates;
}

namespace {

void validate_targets(const AttackConfig& cfg, const ItemCatalog& catalog) {
  if (cfg.targets.empty()) throw ConfigError("attack needs at least one target");
  std::set<ItemIndex> seen;
  for (ItemIndex t : cfg.targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= catalog.size()) {
      throw ConfigError("attack target outside the catalog");
    }
    if (!seen.insert(t).second) throw ConfigError("duplicate attack target " + catalog.id_of(t));
  }
  if (seen.size() >= catalog.size()) throw ConfigError("every catalog item is a target");
}

class LengthSampler {
 public:
  LengthSampler(const InteractionDataset& ds, const LengthPolicy& policy, std::size_t min_len)
      : policy_(policy), min_len_(min_len) {
    if (policy.empirical) {
      for (const UserRecord& u : ds.users()) {
        if (u.label == UserLabel::kGenuine) lengths_.push_back(u.items.size());
      }
      if (lengths_.empty()) throw DataError("no genuine users to take profile lengths from");
    } else if (policy.min_len < 1 || policy.max_len < policy.min_len) {
      throw ConfigError("bad profile length range");
    }
  }

  std::size_t operator()(std::mt19937_64& rng) const {
    std::size_t len;
    if (policy_.empirical) {
      std::uniform_int_distribution<std::size_t> pick(0, lengths_.size() - 1);
      len = lengths_[pick(rng)];
    } else {
      std::uniform_int_distribution<int> pick(policy_.min_len, policy_.max_len);
      len = static_cast<std::size_t>(pick(rng));
    }
    return std::max(len, min_len_);
  }

 private:
  LengthPolicy policy_;
  std::size_t min_len_;
  std::vector<std::size_t> lengths_;
};

// Slot layout: -1 marks a filler slot, otherwise the target placed there. One
// target always takes the final position; the rest go to random slots.
std::vector<ItemIndex> target_layout(std::span<const ItemIndex> targets, std::size_t len,
                                     bool target_first, std::mt19937_64& rng) {
  std::vector<ItemIndex> order(targets.begin(), targets.end());
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ItemIndex> slots(len, -1);
  slots[len - 1] = order[0];
  std::vector<std::size_t> free;
  const std::size_t first_free = target_first && order.size() > 1 ? 1 : 0;
  for (std::size_t i = first_free; i + 1 < len; ++i) free.push_back(i);
  std::shuffle(free.begin(), free.end(), rng);
  std::size_t next = 1;
  if (first_free == 1) slots[0] = order[next++];
  for (std::size_t k = 0; next < order.size(); ++k, ++next) slots[free[k]] = order[next];
  return slots;
}

std::string fresh_id(const InteractionDataset& ds, const std::string& prefix, std::size_t i,
                     std::unordered_set<std::string>& taken) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  std::string id = prefix + buf;
  while (ds.find(id) || taken.count(id)) id += "_";
  taken.insert(id);
  return id;
}

// Fills non-target slots with draws from `pool`, without repeats inside one
// profile while the pool allows it.
std::vector<FraudsterProfile> pooled_attack(const InteractionDataset& ds,
                                            const AttackConfig& cfg,
                                            const std::vector<ItemIndex>& pool, std::size_t n) {
  std::mt19937_64 rng(cfg.seed);
  LengthSampler lengths(ds, cfg.lengths, cfg.targets.size() + 1);
  std::unordered_set<std::string> taken;
  std::vector<FraudsterProfile> out;
  out.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t len = lengths(rng);
    std::vector<ItemIndex> slots = target_layout(cfg.targets, len, false, rng);
    const std::size_t n_fill = len - cfg.targets.size();
    std::vector<ItemIndex> fill;
    if (n_fill <= pool.size()) {
      std::vector<ItemIndex> shuffled = pool;
      for (std::size_t k = 0; k < n_fill; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, shuffled.size() - 1);
        std::swap(shuffled[k], shuffled[pick(rng)]);
        fill.push_back(shuffled[k]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (std::size_t k = 0; k < n_fill; ++k) fill.push_back(pool[pick(rng)]);
    }
    std::size_t f = 0;
    for (ItemIndex& s : slots) {
      if (s < 0) s = fill[f++];
    }
    out.push_back({fresh_id(ds, cfg.id_prefix, p, taken), std::move(slots)});
  }
  return out;
}

}  // namespace

std::vector<FraudsterProfile> random_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                            const AttackConfig& cfg) {
  validate_targets(cfg, catalog);
  const std::set<ItemIndex> targets(cfg.targets.begin(), cfg.targets.end());
  std::vector<ItemIndex> pool;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (!targets.count(static_cast<ItemIndex>(i))) pool.push_back(static_cast<ItemIndex>(i));
  }
  return pooled_attack(ds, cfg, pool, profile_count(ds, cfg.budget_fraction));
}

std::vector<FraudsterProfile> bandwagon_attack(const InteractionDataset& ds,
                                               const ItemCatalog& catalog, const AttackConfig& cfg) {
  validate_targets(cfg, catalog);
  const std::vector<std::int64_t> counts = ds.item_counts(catalog.size());
  return pooled_attack(ds, cfg, popular_pool(counts, catalog, cfg.targets, cfg.popular_fraction),
                       profile_count(ds, cfg.budget_fraction));
}

std::vector<FraudsterProfile> dp_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                        const AttackConfig& cfg, const RecommenderState& surrogate) {
  if (surrogate.epochs_trained() == 0) throw ConfigError("dp attack needs a trained surrogate");
  if (static_cast<std::size_t>(surrogate.n_items()) != catalog.size()) {
    throw ConfigError("surrogate and catalog disagree on item count");
  }
  const int max_len = surrogate.config().max_len;
  return dp_attack(ds, catalog, cfg, [&surrogate, max_len](std::span<const ItemIndex> history) {
    if (static_cast<int>(history.size()) > max_len) history = history.subspan(history.size() - max_len);
    return surrogate.next_scores(history);
  });
}

std::vector<FraudsterProfile> dp_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                        const AttackConfig& cfg, const SuccessorScorer& scorer) {
  validate_targets(cfg, catalog);
  const std::size_t n = profile_count(ds, cfg.budget_fraction);
  const std::set<ItemIndex> targets(cfg.targets.begin(), cfg.targets.end());
  std::mt19937_64 rng(cfg.seed);
  LengthSampler lengths(ds, cfg.lengths, cfg.targets.size() + 1);
  std::unordered_set<std::string> taken;
  std::vector<FraudsterProfile> out;
  out.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t len = lengths(rng);
    std::vector<ItemIndex> slots = target_layout(cfg.targets, len, true, rng);
    std::vector<ItemIndex> seq;
    std::set<ItemIndex> used;
    for (std::size_t i = 0; i < len; ++i) {
      if (slots[i] >= 0) {
        seq.push_back(slots[i]);
        continue;
      }
      const std::vector<ItemIndex> context =
          seq.empty() ? std::vector<ItemIndex>{cfg.targets.front()} : seq;
      const ad::Vector s = scorer(context);
      if (static_cast<std::size_t>(s.size()) != catalog.size()) {
        throw DataError("surrogate scores do not cover the catalog");
      }
      ItemIndex best = -1;
      for (std::size_t j = 0; j < catalog.size(); ++j) {
        const auto v = static_cast<ItemIndex>(j);
        if (targets.count(v) || used.count(v)) continue;
        if (best < 0 || s(v) > s(best) || (s(v) == s(best) && catalog.lex_rank(v) < catalog.lex_rank(best))) {
          best = v;
        }
      }
      if (best < 0) {
        // Every non-target already used: allow repeats.
        used.clear();
        --i;
        continue;
      }
      used.insert(best);
      seq.push_back(best);
    }
    out.push_back({fresh_id(ds, cfg.id_prefix, p, taken), std::move(seq)});
  }
  return out;
}

std::vector<FraudsterProfile> generate_attack(const InteractionDataset& ds,
                                              const ItemCatalog& catalog, const AttackConfig& cfg,
                                              const RecommenderState* surrogate) {
  switch (cfg.kind) {
    case AttackKind::kRandom: return random_attack(ds, catalog, cfg);
    case AttackKind::kBandwagon: return bandwagon_attack(ds, catalog, cfg);
    case AttackKind::kDp:
      if (surrogate == nullptr) throw ConfigError("dp attack needs a surrogate recommender");
      return dp_attack(ds, catalog, cfg, *surrogate);
  }
  throw ConfigError("unknown attack kind");
}

InteractionDataset inject(const InteractionDataset& ds, std::span<const FraudsterProfile> profiles) {
  std::vector<UserRecord> users = ds.users();
  std::unordered_set<std::string> ids;
  for (const UserRecord& u : users) ids.insert(u.user_id);
  for (const FraudsterProfile& p : profiles) {
    if (!ids.insert(p.user_id).second) throw DataError("inject: user id collision '" + p.user_id + "'");
    users.push_back({p.user_id, p.items, UserLabel::kFraudster});
  }
  return InteractionDataset(std::move(users), ds.scenario());
}

SupervisedSet make_known_fraudsters(const InteractionDataset& ds, const ItemCatalog& catalog,
                                    std::uint64_t seed, const SupervisedConfig& cfg) {
  if (cfg.n_targets < 1 || static_cast<std::size_t>(cfg.n_targets) >= catalog.size()) {
    throw ConfigError("supervised set: bad target count");
  }
  if (cfg.groups < 1) throw ConfigError("supervised set: need at least one group");
  if (!(cfg.fraction > 0.0)) throw ConfigError("supervised set: fraction must be positive");
  const auto total = static_cast<std::size_t>(
      std::floor(cfg.fraction * static_cast<double>(ds.size()) + 1e-9));
  const auto groups = static_cast<std::size_t>(cfg.groups);
  if (total < groups) throw ConfigError("supervised set: fewer profiles than groups");

  std::mt19937_64 rng(seed);
  std::vector<ItemIndex> pool(catalog.size());
  std::iota(pool.begin(), pool.end(), 0);
  if (cfg.target_pool == "tail") {
    if (!(cfg.tail_fraction > 0.0 && cfg.tail_fraction <= 1.0)) {
      throw ConfigError("supervised set: tail fraction must lie in (0, 1]");
    }
    const std::vector<std::int64_t> counts = ds.item_counts(catalog.size());
    std::sort(pool.begin(), pool.end(), [&](ItemIndex a, ItemIndex b) {
      if (counts[a] != counts[b]) return counts[a] < counts[b];
      return catalog.lex_rank(a) < catalog.lex_rank(b);
    });
    const auto tail = std::max<std::size_t>(
        static_cast<std::size_t>(cfg.n_targets),
        static_cast<std::size_t>(std::floor(cfg.tail_fraction * static_cast<double>(catalog.size()))));
    pool.resize(std::min(tail, pool.size()));
  } else if (cfg.target_pool != "uniform") {
    throw ConfigError("supervised set: unknown target pool '" + cfg.target_pool + "'");
  }
  std::shuffle(pool.begin(), pool.end(), rng);

  const std::vector<std::int64_t> counts = ds.item_counts(catalog.size());
  SupervisedSet out;
  std::set<ItemIndex> all_targets;
  for (std::size_t g = 0; g < groups; ++g) {
    AttackConfig ac;
    ac.kind = AttackKind::kBandwagon;
    for (std::size_t k = 0; k < static_cast<std::size_t>(cfg.n_targets); ++k) {
      ac.targets.push_back(pool[(g * static_cast<std::size_t>(cfg.n_targets) + k) % pool.size()]);
    }
    all_targets.insert(ac.targets.begin(), ac.targets.end());
    ac.seed = rng();
    char prefix[32];
    std::snprintf(prefix, sizeof(prefix), "g%02zu_", g);
    ac.id_prefix = groups > 1 ? cfg.id_prefix + prefix : cfg.id_prefix;
    const std::size_t n = total / groups + (g < total % groups ? 1 : 0);
    const auto fillers = popular_pool(counts, catalog, ac.targets, ac.popular_fraction);
    for (FraudsterProfile& p : pooled_attack(ds, ac, fillers, n)) {
      out.users.push_back({std::move(p.user_id), std::move(p.items), UserLabel::kFraudster});
    }
  }
  out.targets.assign(all_targets.begin(), all_targets.end());
  return out;
}

}  // namespace lorec
