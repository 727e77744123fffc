#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lorec {

// Catalog position of an item. Models and attacks work on indices; files and
// public ranking results use the opaque string ids.
using ItemIndex = int;

struct ItemRecord {
  std::string item_id;
  std::string title;
  std::string category;
  std::int64_t popularity = 0;
};

// Immutable, validated item table: ids unique, titles non-empty, popularity
// non-negative, at least one item.
class ItemCatalog {
 public:
  ItemCatalog() = default;
  explicit ItemCatalog(std::vector<ItemRecord> items);

  std::size_t size() const { return items_.size(); }
  const std::vector<ItemRecord>& items() const { return items_; }
  const ItemRecord& at(ItemIndex i) const { return items_.at(static_cast<std::size_t>(i)); }
  const std::string& id_of(ItemIndex i) const { return at(i).item_id; }
  std::optional<ItemIndex> find(std::string_view item_id) const;
  ItemIndex index_of(std::string_view item_id) const;  // throws DataError

  // Position of the item in ascending item_id order; used for tie-breaking.
  int lex_rank(ItemIndex i) const { return lex_rank_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& lex_ranks() const { return lex_rank_; }

  // Returns a copy with popularity replaced by the given counts.
  ItemCatalog with_popularity(std::span<const std::int64_t> counts) const;

 private:
  std::vector<ItemRecord> items_;
  std::unordered_map<std::string, ItemIndex> index_;
  std::vector<int> lex_rank_;
};

enum class UserLabel { kGenuine, kFraudster };

std::string_view to_string(UserLabel label);
UserLabel parse_user_label(std::string_view text);

struct UserRecord {
  std::string user_id;
  std::vector<ItemIndex> items;  // time-ordered
  UserLabel label = UserLabel::kGenuine;
};

// Users' ordered interaction sequences over a paired catalog. Labels are
// evaluation-side ground truth; defenses never read them.
class InteractionDataset {
 public:
  InteractionDataset() = default;
  InteractionDataset(std::vector<UserRecord> users, std::string scenario);

  std::size_t size() const { return users_.size(); }
  const std::vector<UserRecord>& users() const { return users_; }
  const UserRecord& at(std::size_t i) const { return users_.at(i); }
  const std::string& scenario() const { return scenario_; }
  std::optional<std::size_t> find(std::string_view user_id) const;

  std::size_t count(UserLabel label) const;
  // Interaction count per catalog item.
  std::vector<std::int64_t> item_counts(std::size_t n_items) const;
  std::vector<std::size_t> lengths() const;

  friend bool operator==(const InteractionDataset& a, const InteractionDataset& b);

 private:
  std::vector<UserRecord> users_;
  std::string scenario_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct UserSplit {
  std::string user_id;
  UserLabel label = UserLabel::kGenuine;
  std::vector<ItemIndex> train;  // most recent max_len items before valid
  ItemIndex valid = -1;
  ItemIndex test = -1;
};

struct DataSplit {
  std::vector<UserSplit> users;
  int max_len = 50;
};

struct SyntheticSpec {
  int n_users = 2000;
  int n_items = 500;
  double mean_seq_len = 10.0;
  double popularity_skew = 1.2;
  // Probability that an item's title and category name its theme. At 0 the
  // text carries no theme information.
  double fraud_signal_strength = 0.8;
  int n_themes = 20;
  // Probability that the next interaction stays in the current theme.
  double coherence = 0.85;
  // Freshly listed items that no genuine user has interacted with yet.
  int cold_items = 10;
  int min_seq_len = 5;
  int max_seq_len = 50;
  std::string scenario = "game recommendation";

  void validate() const;
};

ItemCatalog load_catalog(const std::filesystem::path& path);
InteractionDataset load_interactions(const std::filesystem::path& path, const ItemCatalog& catalog,
                                     int min_interactions = 5,
                                     std::string scenario = "item recommendation");
void write_catalog(const std::filesystem::path& path, const ItemCatalog& catalog);
void write_interactions(const std::filesystem::path& path, const InteractionDataset& ds,
                        const ItemCatalog& catalog, bool with_labels = true);

// Drops users with fewer than `min_interactions` items.
InteractionDataset filter_min_interactions(const InteractionDataset& ds, int min_interactions);

DataSplit split_leave_one_out(const InteractionDataset& ds, int max_len = 50);

std::pair<ItemCatalog, InteractionDataset> generate_synthetic(const SyntheticSpec& spec,
                                                              std::uint64_t seed);

}  // namespace lorec
