#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorec/autodiff.hpp"
#include "lorec/data.hpp"

namespace lorec {

class RecommenderState;

enum class AttackKind { kRandom, kBandwagon, kDp };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view text);

struct LengthPolicy {
  // Empirical: lengths resampled from the genuine users of the dataset.
  // Fixed range otherwise, uniform in [min_len, max_len].
  bool empirical = true;
  int min_len = 5;
  int max_len = 50;
};

struct AttackConfig {
  AttackKind kind = AttackKind::kBandwagon;
  double budget_fraction = 0.01;
  std::vector<ItemIndex> targets;
  std::uint64_t seed = 0;
  LengthPolicy lengths;
  double popular_fraction = 0.1;  // bandwagon pool size relative to |V|
  std::string id_prefix = "fraud_";
};

struct FraudsterProfile {
  std::string user_id;
  std::vector<ItemIndex> items;
};

// Next-item scores over the whole catalog given a history.
using SuccessorScorer = std::function<ad::Vector(std::span<const ItemIndex>)>;
SuccessorScorer surrogate_scorer(const RecommenderState& surrogate);

// Number of profiles a budget buys; throws ConfigError when it is zero.
std::size_t profile_count(const InteractionDataset& ds, double budget_fraction);

// The floor(fraction * |V|) most interacted non-target items, at least one;
// ties broken by ascending item_id.
std::vector<ItemIndex> popular_pool(std::span<const std::int64_t> counts, const ItemCatalog& catalog,
                                    std::span<const ItemIndex> targets, double fraction);

std::vector<FraudsterProfile> random_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                            const AttackConfig& cfg);
std::vector<FraudsterProfile> bandwagon_attack(const InteractionDataset& ds,
                                               const ItemCatalog& catalog, const AttackConfig& cfg);
std::vector<FraudsterProfile> dp_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                        const AttackConfig& cfg, const RecommenderState& surrogate);
std::vector<FraudsterProfile> dp_attack(const InteractionDataset& ds, const ItemCatalog& catalog,
                                        const AttackConfig& cfg, const SuccessorScorer& scorer);

// Dispatch on cfg.kind; `surrogate` is required for dp.
std::vector<FraudsterProfile> generate_attack(const InteractionDataset& ds,
                                              const ItemCatalog& catalog, const AttackConfig& cfg,
                                              const RecommenderState* surrogate);

InteractionDataset inject(const InteractionDataset& ds, std::span<const FraudsterProfile> profiles);

// floor(fraction * |U|) known Bandwagon profiles, split over `groups`
// independent attacks with n_targets targets each.
struct SupervisedConfig {
  double fraction = 0.1;
  int n_targets = 5;
  int groups = 10;
  // Targets drawn uniformly from the catalog, or from its least-interacted
  // `tail_fraction` of items.
  std::string target_pool = "uniform";  // uniform | tail
  double tail_fraction = 0.1;
  std::string id_prefix = "known_";
};

struct SupervisedSet {
  std::vector<UserRecord> users;  // all labeled fraudster
  std::vector<ItemIndex> targets;  // union over groups, ascending
};

// Bandwagon-style known fraudsters with ids disjoint from `ds`.
SupervisedSet make_known_fraudsters(const InteractionDataset& ds, const ItemCatalog& catalog,
                                    std::uint64_t seed, const SupervisedConfig& cfg = {});

}  // namespace lorec
