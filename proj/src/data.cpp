#include "lorec/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lorec/errors.hpp"

namespace lorec {

using json = nlohmann::json;

// --- ItemCatalog ------------------------------------------------------------

ItemCatalog::ItemCatalog(std::vector<ItemRecord> items) : items_(std::move(items)) {
  if (items_.empty()) throw DataError("catalog is empty");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const ItemRecord& r = items_[i];
    if (r.item_id.empty()) throw DataError("catalog record " + std::to_string(i) + ": empty item_id");
    if (r.title.empty()) {
      throw DataError("catalog record " + std::to_string(i) + " (" + r.item_id + "): empty title");
    }
    if (r.popularity < 0) {
      throw DataError("catalog record " + std::to_string(i) + " (" + r.item_id +
                      "): negative popularity");
    }
    if (!index_.emplace(r.item_id, static_cast<ItemIndex>(i)).second) {
      throw DataError("catalog record " + std::to_string(i) + ": duplicate item_id '" + r.item_id +
                      "'");
    }
  }
  std::vector<int> order(items_.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return items_[a].item_id < items_[b].item_id; });
  lex_rank_.resize(items_.size());
  for (std::size_t r = 0; r < order.size(); ++r) lex_rank_[order[r]] = static_cast<int>(r);
}

std::optional<ItemIndex> ItemCatalog::find(std::string_view item_id) const {
  auto it = index_.find(std::string(item_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ItemIndex ItemCatalog::index_of(std::string_view item_id) const {
  auto found = find(item_id);
  if (!found) throw DataError("unknown item_id '" + std::string(item_id) + "'");
  return *found;
}

ItemCatalog ItemCatalog::with_popularity(std::span<const std::int64_t> counts) const {
  if (counts.size() != items_.size()) throw DataError("popularity vector size mismatch");
  std::vector<ItemRecord> items = items_;
  for (std::size_t i = 0; i < items.size(); ++i) items[i].popularity = counts[i];
  return ItemCatalog(std::move(items));
}

// --- labels -----------------------------------------------------------------

std::string_view to_string(UserLabel label) {
  return label == UserLabel::kGenuine ? "genuine" : "fraudster";
}

UserLabel parse_user_label(std::string_view text) {
  if (text == "genuine") return UserLabel::kGenuine;
  if (text == "fraudster" || text == "injected-fraudster") return UserLabel::kFraudster;
  throw DataError("unknown user label '" + std::string(text) + "'");
}

// --- InteractionDataset -------------------------------------------------------

InteractionDataset::InteractionDataset(std::vector<UserRecord> users, std::string scenario)
    : users_(std::move(users)), scenario_(std::move(scenario)) {
  for (std::size_t i = 0; i < users_.size(); ++i) {
    if (users_[i].items.empty()) throw DataError("user '" + users_[i].user_id + "' has no items");
    if (!index_.emplace(users_[i].user_id, i).second) {
      throw DataError("duplicate user_id '" + users_[i].user_id + "'");
    }
  }
}

std::optional<std::size_t> InteractionDataset::find(std::string_view user_id) const {
  auto it = index_.find(std::string(user_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t InteractionDataset::count(UserLabel label) const {
  return static_cast<std::size_t>(std::count_if(
      users_.begin(), users_.end(), [label](const UserRecord& u) { return u.label == label; }));
}

std::vector<std::int64_t> InteractionDataset::item_counts(std::size_t n_items) const {
  std::vector<std::int64_t> counts(n_items, 0);
  for (const UserRecord& u : users_) {
    for (ItemIndex v : u.items) counts.at(static_cast<std::size_t>(v)) += 1;
  }
  return counts;
}

std::vector<std::size_t> InteractionDataset::lengths() const {
  std::vector<std::size_t> out;
  out.reserve(users_.size());
  for (const UserRecord& u : users_) out.push_back(u.items.size());
  return out;
}

bool operator==(const InteractionDataset& a, const InteractionDataset& b) {
  if (a.scenario_ != b.scenario_ || a.users_.size() != b.users_.size()) return false;
  for (std::size_t i = 0; i < a.users_.size(); ++i) {
    const UserRecord& x = a.users_[i];
    const UserRecord& y = b.users_[i];
    if (x.user_id != y.user_id || x.items != y.items || x.label != y.label) return false;
  }
  return true;
}

// --- file formats -----------------------------------------------------------

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

json parse_line(const std::string& line, const std::filesystem::path& path, std::size_t lineno) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) throw DataError("not an object");
    return j;
  } catch (const std::exception& e) {
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace

ItemCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  std::vector<ItemRecord> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j = parse_line(line, path, lineno);
    const std::size_t record = items.size();
    ItemRecord r;
    try {
      r.item_id = j.at("item_id").get<std::string>();
      r.title = j.value("title", std::string());
      r.category = j.value("category", std::string());
      r.popularity = j.value("popularity", std::int64_t{0});
    } catch (const json::exception& e) {
      throw DataError("catalog record " + std::to_string(record) + ": " + e.what());
    }
    items.push_back(std::move(r));
  }
  return ItemCatalog(std::move(items));
}

InteractionDataset load_interactions(const std::filesystem::path& path, const ItemCatalog& catalog,
                                     int min_interactions, std::string scenario) {
  std::ifstream in = open_input(path);
  std::vector<UserRecord> users;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j = parse_line(line, path, lineno);
    UserRecord u;
    std::vector<std::string> ids;
    std::vector<double> stamps;
    try {
      u.user_id = j.at("user_id").get<std::string>();
      ids = j.at("items").get<std::vector<std::string>>();
      if (j.contains("timestamps")) stamps = j.at("timestamps").get<std::vector<double>>();
      if (j.contains("label")) u.label = parse_user_label(j.at("label").get<std::string>());
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!stamps.empty() && stamps.size() != ids.size()) {
      throw DataError("user '" + u.user_id + "': timestamps and items differ in length");
    }
    if (!stamps.empty()) {
      std::vector<std::size_t> order(ids.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return stamps[a] < stamps[b]; });
      std::vector<std::string> sorted;
      for (std::size_t k : order) sorted.push_back(ids[k]);
      ids = std::move(sorted);
    }
    for (const std::string& id : ids) {
      auto idx = catalog.find(id);
      if (!idx) throw DataError("user '" + u.user_id + "' references unknown item '" + id + "'");
      u.items.push_back(*idx);
    }
    if (u.items.empty()) continue;
    users.push_back(std::move(u));
  }
  InteractionDataset ds = filter_min_interactions(InteractionDataset(std::move(users), scenario),
                                                  min_interactions);
  if (ds.size() == 0) throw DataError("no users left after filtering '" + path.string() + "'");
  return ds;
}

void write_catalog(const std::filesystem::path& path, const ItemCatalog& catalog) {
  std::ofstream out = open_output(path);
  for (const ItemRecord& r : catalog.items()) {
    json j = {{"item_id", r.item_id},
              {"title", r.title},
              {"category", r.category},
              {"popularity", r.popularity}};
    out << j.dump() << '\n';
  }
}

void write_interactions(const std::filesystem::path& path, const InteractionDataset& ds,
                        const ItemCatalog& catalog, bool with_labels) {
  std::ofstream out = open_output(path);
  for (const UserRecord& u : ds.users()) {
    json items = json::array();
    for (ItemIndex v : u.items) items.push_back(catalog.id_of(v));
    json j = {{"user_id", u.user_id}, {"items", std::move(items)}};
    if (with_labels) j["label"] = std::string(to_string(u.label));
    out << j.dump() << '\n';
  }
}

InteractionDataset filter_min_interactions(const InteractionDataset& ds, int min_interactions) {
  std::vector<UserRecord> kept;
  for (const UserRecord& u : ds.users()) {
    if (static_cast<int>(u.items.size()) >= min_interactions) kept.push_back(u);
  }
  return InteractionDataset(std::move(kept), ds.scenario());
}

DataSplit split_leave_one_out(const InteractionDataset& ds, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be positive");
  std::vector<std::string> short_users;
  for (const UserRecord& u : ds.users()) {
    if (u.items.size() < 3) short_users.push_back(u.user_id);
  }
  if (!short_users.empty()) {
    std::string msg = "cannot split sequences shorter than 3:";
    for (const std::string& id : short_users) msg += " " + id;
    throw DataError(msg);
  }
  DataSplit split;
  split.max_len = max_len;
  split.users.reserve(ds.size());
  for (const UserRecord& u : ds.users()) {
    const std::size_t n = u.items.size();
    const std::size_t prefix = n - 2;
    const std::size_t start = prefix > static_cast<std::size_t>(max_len) ? prefix - max_len : 0;
    UserSplit s;
    s.user_id = u.user_id;
    s.label = u.label;
    s.train.assign(u.items.begin() + static_cast<std::ptrdiff_t>(start),
                   u.items.begin() + static_cast<std::ptrdiff_t>(prefix));
    s.valid = u.items[n - 2];
    s.test = u.items[n - 1];
    split.users.push_back(std::move(s));
  }
  return split;
}

// --- synthetic benchmark ---------------------------------------------------

void SyntheticSpec::validate() const {
  if (n_users < 1 || n_items < 1) throw ConfigError("synthetic: n_users and n_items must be >= 1");
  if (min_seq_len < 3) throw ConfigError("synthetic: min_seq_len must be >= 3");
  if (mean_seq_len < min_seq_len) throw ConfigError("synthetic: mean_seq_len below min_seq_len");
  if (max_seq_len < min_seq_len) throw ConfigError("synthetic: max_seq_len below min_seq_len");
  if (popularity_skew <= 0) throw ConfigError("synthetic: popularity_skew must be positive");
  if (fraud_signal_strength < 0 || fraud_signal_strength > 1) {
    throw ConfigError("synthetic: fraud_signal_strength must lie in [0, 1]");
  }
  if (coherence < 0 || coherence > 1) throw ConfigError("synthetic: coherence must lie in [0, 1]");
  if (n_themes < 1) throw ConfigError("synthetic: n_themes must be >= 1");
  if (cold_items < 0 || n_items - cold_items < max_seq_len) {
    throw ConfigError("synthetic: need at least max_seq_len warm items");
  }
}

namespace {

const std::vector<std::string>& theme_words() {
  static const std::vector<std::string> words = {
      "Galaxy", "Dragon", "Racing",  "Puzzle",  "Zombie", "Soccer",  "Pirate",  "Ninja",
      "Farm",   "Castle", "Robot",   "Ocean",   "Jungle", "Wizard",  "Cyber",   "Samurai",
      "Desert", "Horror", "Kart",    "Chess",   "Cooking", "Viking", "Mystery", "Arctic",
      "Circus", "Dino",   "Tennis",  "Heist",   "Garden", "Mech",    "Voodoo",  "Alien"};
  return words;
}

const std::vector<std::string>& generic_words() {
  static const std::vector<std::string> words = {"Classic", "Deluxe", "Edition", "Legends",
                                                 "Adventure", "Collection", "World", "Saga",
                                                 "Quest", "Story", "Chronicles", "Ultimate"};
  return words;
}

std::string theme_name(int theme) {
  const auto& words = theme_words();
  if (theme < static_cast<int>(words.size())) return words[static_cast<std::size_t>(theme)];
  return "Theme" + std::to_string(theme);
}

std::string padded(std::string_view prefix, long value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  }
  return std::string(prefix) + digits;
}

int digits_for(long n) {
  int d = 1;
  while (n >= 10) {
    n /= 10;
    ++d;
  }
  return std::max(d, 4);
}

}  // namespace

std::pair<ItemCatalog, InteractionDataset> generate_synthetic(const SyntheticSpec& spec,
                                                              std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int n_items = spec.n_items;
  const int n_warm = n_items - spec.cold_items;

  // Cold items occupy the last catalog positions and are never sampled.
  std::vector<int> rank_of(static_cast<std::size_t>(n_warm));
  std::iota(rank_of.begin(), rank_of.end(), 1);
  std::shuffle(rank_of.begin(), rank_of.end(), rng);

  std::vector<int> theme_of(static_cast<std::size_t>(n_items));
  {
    std::vector<int> slots(static_cast<std::size_t>(n_items));
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    for (int i = 0; i < n_items; ++i) theme_of[slots[i]] = i % spec.n_themes;
  }

  std::vector<double> weight(static_cast<std::size_t>(n_items), 0.0);
  for (int i = 0; i < n_warm; ++i) weight[i] = std::pow(rank_of[i], -spec.popularity_skew);

  std::vector<std::vector<int>> members(static_cast<std::size_t>(spec.n_themes));
  std::vector<double> theme_mass(static_cast<std::size_t>(spec.n_themes), 0.0);
  for (int i = 0; i < n_warm; ++i) {
    members[theme_of[i]].push_back(i);
    theme_mass[theme_of[i]] += weight[i];
  }

  // Text features: theme-legible items name their theme in title and category.
  const int width = digits_for(n_items - 1);
  std::vector<ItemRecord> records(static_cast<std::size_t>(n_items));
  const auto& generic = generic_words();
  for (int i = 0; i < n_items; ++i) {
    const bool legible = unit(rng) < spec.fraud_signal_strength;
    const std::string& g1 = generic[rng() % generic.size()];
    const std::string& g2 = generic[rng() % generic.size()];
    ItemRecord& r = records[i];
    r.item_id = padded("i", i, width);
    const std::string number = padded("", i, width);
    if (legible) {
      r.title = theme_name(theme_of[i]) + " " + g1 + " " + number;
      r.category = theme_name(theme_of[i]);
    } else {
      r.title = g1 + " " + g2 + " " + number;
      r.category = "General";
    }
  }

  std::discrete_distribution<int> pick_theme(theme_mass.begin(), theme_mass.end());
  const double extra_mean = spec.mean_seq_len - spec.min_seq_len;
  std::poisson_distribution<int> extra(extra_mean > 0 ? extra_mean : 1e-12);

  std::vector<UserRecord> users(static_cast<std::size_t>(spec.n_users));
  const int user_width = digits_for(spec.n_users);
  std::vector<char> used(static_cast<std::size_t>(n_items), 0);
  for (int u = 0; u < spec.n_users; ++u) {
    int len = spec.min_seq_len + (extra_mean > 0 ? extra(rng) : 0);
    len = std::min({len, spec.max_seq_len, n_warm});
    UserRecord& user = users[u];
    user.user_id = padded("u", u, user_width);
    int theme = pick_theme(rng);
    for (int step = 0; step < len; ++step) {
      if (step > 0 && unit(rng) >= spec.coherence) theme = pick_theme(rng);
      // Themes exhausted by this user are redrawn from the global mass.
      double avail = 0.0;
      for (int tries = 0; tries < 1000; ++tries) {
        avail = 0.0;
        for (int v : members[theme]) avail += used[v] ? 0.0 : weight[v];
        if (avail > 0.0) break;
        theme = pick_theme(rng);
      }
      if (avail <= 0.0) break;
      double target = unit(rng) * avail;
      int chosen = -1;
      for (int v : members[theme]) {
        if (used[v]) continue;
        chosen = v;
        target -= weight[v];
        if (target < 0.0) break;
      }
      used[chosen] = 1;
      user.items.push_back(chosen);
    }
    for (int v : user.items) used[v] = 0;
  }

  InteractionDataset ds(std::move(users), spec.scenario);
  const std::vector<std::int64_t> counts = ds.item_counts(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) records[i].popularity = counts[i];
  return {ItemCatalog(std::move(records)), std::move(ds)};
}

}  // namespace lorec
