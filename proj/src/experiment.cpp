#include "lorec/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "lorec/errors.hpp"

namespace lorec {

using nlohmann::json;

std::string_view to_string(RunMode mode) {
  switch (mode) {
    case RunMode::kBackbone: return "backbone";
    case RunMode::kLlm4Dec: return "llm4dec";
    case RunMode::kLorec: return "lorec";
  }
  return "lorec";
}

RunMode parse_run_mode(std::string_view text) {
  if (text == "backbone") return RunMode::kBackbone;
  if (text == "llm4dec") return RunMode::kLlm4Dec;
  if (text == "lorec") return RunMode::kLorec;
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

// --- configuration ---------------------------------------------------------------------

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  template <class T, class Parse>
  void get_parsed(const char* key, T& out, Parse parse) {
    std::string text;
    get(key, text);
    if (j_.contains(key)) out = parse(text);
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown config key '" + name_ + "." + item.key() + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::string hex_digest(const std::string& text) { return EmbeddingCache::digest(text); }

}  // namespace

void ExperimentConfig::validate() const {
  require(dataset.source == "synthetic" || dataset.source == "files",
          "dataset.source must be 'synthetic' or 'files'");
  if (dataset.source == "synthetic") dataset.synthetic.validate();
  if (dataset.source == "files") {
    require(!dataset.catalog.empty() && !dataset.interactions.empty(),
            "dataset.catalog and dataset.interactions are required for file sources");
  }
  require(dataset.min_interactions >= 3, "dataset.min_interactions must be >= 3");
  require(max_len >= 1, "split.max_len must be >= 1");
  require(model.rec.dim >= 1 && model.rec.blocks >= 1, "model.dim and model.blocks must be >= 1");
  require(model.lr > 0 && model.batch_size >= 1, "model.lr and model.batch_size must be positive");
  require(attack.budget > 0 && attack.budget < 1, "attack.budget must lie in (0, 1)");
  require(attack.n_targets >= 1, "attack.n_targets must be >= 1");
  require(attack.target_mode == "unpopular" || attack.target_mode == "popular",
          "attack.target_mode must be 'unpopular' or 'popular'");
  require(supervised.fraction > 0 && supervised.fraction < 1, "supervised.fraction must lie in (0, 1)");
  require(supervised.n_targets >= 1, "supervised.n_targets must be >= 1");
  require(supervised.groups >= 1, "supervised.groups must be >= 1");
  require(supervised.target_pool == "uniform" || supervised.target_pool == "tail",
          "supervised.target_pool must be 'uniform' or 'tail'");
  require(supervised.tail_fraction > 0 && supervised.tail_fraction <= 1,
          "supervised.tail_fraction must lie in (0, 1]");
  require(provider.kind == "mock" || provider.kind == "remote", "provider.kind must be mock or remote");
  require(provider.dimension >= 1, "provider.dimension must be >= 1");
  require(prompt_items >= 1, "provider.prompt_items must be >= 1");
  require(calibrator.lambda1 >= 0 && calibrator.lambda2 >= 0, "calibrator lambdas must be >= 0");
  require(std::isfinite(calibrator.xi_hat), "calibrator.xi_hat must be finite");
  require(calibrator.lr > 0 && calibrator.batch_size >= 2 && calibrator.hidden >= 1,
          "calibrator.lr, batch_size (>= 2) and hidden must be positive");
  require(llm4dec.lambda >= 0, "llm4dec.lambda must be >= 0");
  require(llm4dec.filter == "soft" || llm4dec.filter == "hard", "llm4dec.filter must be soft or hard");
  require(llm4dec.quantile > 0 && llm4dec.quantile <= 1, "llm4dec.quantile must lie in (0, 1]");
  require(llm4dec.epochs >= 1 && llm4dec.lr > 0, "llm4dec.epochs and lr must be positive");
  require(schedule.rounds >= 1 && schedule.rec_epochs >= 1 && schedule.lct_epochs >= 1,
          "schedule counts must be >= 1");
  require(schedule.final_rec_epochs >= 0, "schedule.final_rec_epochs must be >= 0");
  require(metrics.k_rec >= 1 && metrics.k_target >= 1, "metric k values must be >= 1");
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Section root(j, "config");
  root.get("seed", c.seed);
  root.get_parsed("mode", c.mode, parse_run_mode);
  std::string out_dir = c.output_dir.string();
  root.get("output_dir", out_dir);
  c.output_dir = out_dir;

  if (const json* d = root.sub("dataset")) {
    Section s(*d, "dataset");
    s.get("source", c.dataset.source);
    std::string catalog, interactions;
    s.get("catalog", catalog);
    s.get("interactions", interactions);
    c.dataset.catalog = catalog;
    c.dataset.interactions = interactions;
    s.get("min_interactions", c.dataset.min_interactions);
    s.get("scenario", c.dataset.scenario);
    if (const json* syn = s.sub("synthetic")) {
      Section t(*syn, "dataset.synthetic");
      SyntheticSpec& sp = c.dataset.synthetic;
      t.get("n_users", sp.n_users);
      t.get("n_items", sp.n_items);
      t.get("mean_seq_len", sp.mean_seq_len);
      t.get("popularity_skew", sp.popularity_skew);
      t.get("fraud_signal_strength", sp.fraud_signal_strength);
      t.get("n_themes", sp.n_themes);
      t.get("coherence", sp.coherence);
      t.get("cold_items", sp.cold_items);
      t.get("min_seq_len", sp.min_seq_len);
      t.get("max_seq_len", sp.max_seq_len);
      t.get("scenario", sp.scenario);
      t.finish();
    }
    s.finish();
  }
  if (const json* d = root.sub("split")) {
    Section s(*d, "split");
    s.get("max_len", c.max_len);
    s.finish();
  }
  if (const json* d = root.sub("model")) {
    Section s(*d, "model");
    s.get_parsed("backbone", c.model.rec.backbone, parse_backbone_kind);
    s.get_parsed("encoder", c.model.rec.encoder, parse_encoder_mode);
    s.get("dim", c.model.rec.dim);
    s.get("blocks", c.model.rec.blocks);
    s.get("lr", c.model.lr);
    s.get("batch_size", c.model.batch_size);
    s.get_parsed("negatives", c.model.negatives, parse_negative_policy);
    s.get("exact_bound", c.model.exact_bound);
    s.finish();
  }
  if (const json* d = root.sub("attack")) {
    Section s(*d, "attack");
    s.get("enabled", c.attack.enabled);
    s.get_parsed("kind", c.attack.kind, parse_attack_kind);
    s.get("budget", c.attack.budget);
    s.get("n_targets", c.attack.n_targets);
    s.get("target_mode", c.attack.target_mode);
    s.get("targets", c.attack.targets);
    s.get("popular_fraction", c.attack.popular_fraction);
    if (const json* l = s.sub("lengths")) {
      Section t(*l, "attack.lengths");
      t.get("empirical", c.attack.lengths.empirical);
      t.get("min_len", c.attack.lengths.min_len);
      t.get("max_len", c.attack.lengths.max_len);
      t.finish();
    }
    s.finish();
  }
  if (const json* d = root.sub("supervised")) {
    Section s(*d, "supervised");
    s.get("fraction", c.supervised.fraction);
    s.get("n_targets", c.supervised.n_targets);
    s.get("groups", c.supervised.groups);
    s.get("target_pool", c.supervised.target_pool);
    s.get("tail_fraction", c.supervised.tail_fraction);
    s.finish();
  }
  if (const json* d = root.sub("provider")) {
    Section s(*d, "provider");
    s.get("kind", c.provider.kind);
    s.get("dimension", c.provider.dimension);
    s.get("seed", c.provider.seed);
    s.get("prompt_items", c.prompt_items);
    if (const json* r = s.sub("remote")) {
      Section t(*r, "provider.remote");
      RemoteSettings& rs = c.provider.remote;
      t.get("endpoint_env", rs.endpoint_env);
      t.get("credential_env", rs.credential_env);
      t.get("endpoint", rs.endpoint);
      t.get("timeout_s", rs.timeout_s);
      t.get("max_retries", rs.max_retries);
      std::string cache = rs.cache_dir.string();
      t.get("cache_dir", cache);
      rs.cache_dir = cache;
      t.finish();
    }
    s.finish();
  }
  if (const json* d = root.sub("calibrator")) {
    Section s(*d, "calibrator");
    s.get("lambda1", c.calibrator.lambda1);
    s.get("lambda2", c.calibrator.lambda2);
    s.get("xi_hat", c.calibrator.xi_hat);
    s.get_parsed("entropy_form", c.calibrator.entropy_form, parse_entropy_form);
    s.get("lr", c.calibrator.lr);
    s.get("batch_size", c.calibrator.batch_size);
    s.get("hidden", c.calibrator.hidden);
    s.get("collapse_floor", c.calibrator.collapse_floor);
    s.finish();
  }
  if (const json* d = root.sub("llm4dec")) {
    Section s(*d, "llm4dec");
    s.get("lambda", c.llm4dec.lambda);
    s.get("filter", c.llm4dec.filter);
    s.get("quantile", c.llm4dec.quantile);
    s.get("epochs", c.llm4dec.epochs);
    s.get("lr", c.llm4dec.lr);
    s.finish();
  }
  if (const json* d = root.sub("schedule")) {
    Section s(*d, "schedule");
    s.get("rounds", c.schedule.rounds);
    s.get("rec_epochs", c.schedule.rec_epochs);
    s.get("lct_epochs", c.schedule.lct_epochs);
    s.get("final_rec_epochs", c.schedule.final_rec_epochs);
    s.get("lct_reset", c.schedule.lct_reset);
    s.finish();
  }
  if (const json* d = root.sub("metrics")) {
    Section s(*d, "metrics");
    s.get("k_rec", c.metrics.k_rec);
    s.get("k_target", c.metrics.k_target);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  ExperimentConfig c = parse_config(j);
  // Relative dataset paths resolve against the config file's directory.
  const auto base = path.parent_path();
  auto resolve = [&base](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(c.dataset.catalog);
  resolve(c.dataset.interactions);
  return c;
}

json to_json(const ExperimentConfig& c) {
  const SyntheticSpec& sp = c.dataset.synthetic;
  const RemoteSettings& rs = c.provider.remote;
  return json{
      {"seed", c.seed},
      {"mode", std::string(to_string(c.mode))},
      {"output_dir", c.output_dir.string()},
      {"dataset",
       {{"source", c.dataset.source},
        {"catalog", c.dataset.catalog.string()},
        {"interactions", c.dataset.interactions.string()},
        {"min_interactions", c.dataset.min_interactions},
        {"scenario", c.dataset.scenario},
        {"synthetic",
         {{"n_users", sp.n_users},
          {"n_items", sp.n_items},
          {"mean_seq_len", sp.mean_seq_len},
          {"popularity_skew", sp.popularity_skew},
          {"fraud_signal_strength", sp.fraud_signal_strength},
          {"n_themes", sp.n_themes},
          {"coherence", sp.coherence},
          {"cold_items", sp.cold_items},
          {"min_seq_len", sp.min_seq_len},
          {"max_seq_len", sp.max_seq_len},
          {"scenario", sp.scenario}}}}},
      {"split", {{"max_len", c.max_len}}},
      {"model",
       {{"backbone", std::string(to_string(c.model.rec.backbone))},
        {"encoder", std::string(to_string(c.model.rec.encoder))},
        {"dim", c.model.rec.dim},
        {"blocks", c.model.rec.blocks},
        {"lr", c.model.lr},
        {"batch_size", c.model.batch_size},
        {"negatives", std::string(to_string(c.model.negatives))},
        {"exact_bound", c.model.exact_bound}}},
      {"attack",
       {{"enabled", c.attack.enabled},
        {"kind", std::string(to_string(c.attack.kind))},
        {"budget", c.attack.budget},
        {"n_targets", c.attack.n_targets},
        {"target_mode", c.attack.target_mode},
        {"targets", c.attack.targets},
        {"popular_fraction", c.attack.popular_fraction},
        {"lengths",
         {{"empirical", c.attack.lengths.empirical},
          {"min_len", c.attack.lengths.min_len},
          {"max_len", c.attack.lengths.max_len}}}}},
      {"supervised",
       {{"fraction", c.supervised.fraction},
        {"n_targets", c.supervised.n_targets},
        {"groups", c.supervised.groups},
        {"target_pool", c.supervised.target_pool},
        {"tail_fraction", c.supervised.tail_fraction}}},
      {"provider",
       {{"kind", c.provider.kind},
        {"dimension", c.provider.dimension},
        {"seed", c.provider.seed},
        {"prompt_items", c.prompt_items},
        {"remote",
         {{"endpoint_env", rs.endpoint_env},
          {"credential_env", rs.credential_env},
          {"endpoint", rs.endpoint},
          {"timeout_s", rs.timeout_s},
          {"max_retries", rs.max_retries},
          {"cache_dir", rs.cache_dir.string()}}}}},
      {"calibrator",
       {{"lambda1", c.calibrator.lambda1},
        {"lambda2", c.calibrator.lambda2},
        {"xi_hat", c.calibrator.xi_hat},
        {"entropy_form", std::string(to_string(c.calibrator.entropy_form))},
        {"lr", c.calibrator.lr},
        {"batch_size", c.calibrator.batch_size},
        {"hidden", c.calibrator.hidden},
        {"collapse_floor", c.calibrator.collapse_floor}}},
      {"llm4dec",
       {{"lambda", c.llm4dec.lambda},
        {"filter", c.llm4dec.filter},
        {"quantile", c.llm4dec.quantile},
        {"epochs", c.llm4dec.epochs},
        {"lr", c.llm4dec.lr}}},
      {"schedule",
       {{"rounds", c.schedule.rounds},
        {"rec_epochs", c.schedule.rec_epochs},
        {"lct_epochs", c.schedule.lct_epochs},
        {"final_rec_epochs", c.schedule.final_rec_epochs},
        {"lct_reset", c.schedule.lct_reset}}},
      {"metrics", {{"k_rec", c.metrics.k_rec}, {"k_target", c.metrics.k_target}}},
  };
}

// The output directory is where results go, not part of the experiment.
std::string config_digest(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  return hex_digest(j.dump());
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : stream) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t x = seed ^ h;
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// --- metrics --------------------------------------------------------------------------

TargetMetrics target_metrics(std::span<const std::vector<ItemIndex>> topk,
                             std::span<const std::vector<ItemIndex>> interactions,
                             std::span<const ItemIndex> targets, std::size_t k) {
  if (topk.size() != interactions.size()) throw DataError("target_metrics: user lists misaligned");
  if (targets.empty()) throw DataError("target_metrics: no targets");
  TargetMetrics m;
  std::size_t counted = 0;
  for (ItemIndex t : targets) {
    if (t < 0) throw DataError("target_metrics: target absent from catalog");
    std::size_t eligible = 0;
    double hits = 0.0, gain = 0.0;
    for (std::size_t u = 0; u < topk.size(); ++u) {
      const auto& seen = interactions[u];
      if (std::find(seen.begin(), seen.end(), t) != seen.end()) continue;
      ++eligible;
      const std::size_t n = std::min(k, topk[u].size());
      for (std::size_t r = 0; r < n; ++r) {
        if (topk[u][r] == t) {
          hits += 1.0;
          gain += 1.0 / std::log2(static_cast<double>(r) + 2.0);
          break;
        }
      }
    }
    if (eligible == 0) continue;
    m.hr += hits / static_cast<double>(eligible);
    m.ndcg += gain / static_cast<double>(eligible);
    ++counted;
  }
  if (counted > 0) {
    m.hr /= static_cast<double>(counted);
    m.ndcg /= static_cast<double>(counted);
  }
  return m;
}

EvaluationResult evaluate_all(const RecommenderState& state, const DataSplit& split,
                              const InteractionDataset& full, const ItemCatalog& catalog,
                              std::span<const ItemIndex> targets, const MetricSettings& metrics) {
  for (ItemIndex t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= catalog.size()) {
      throw DataError("evaluate: target absent from catalog");
    }
  }
  const auto k_rec = static_cast<std::size_t>(metrics.k_rec);
  const auto k_tar = static_cast<std::size_t>(metrics.k_target);
  EvaluationResult res;
  std::vector<std::vector<ItemIndex>> lists, seen;
  std::vector<char> excluded(catalog.size());
  for (const UserSplit& u : split.users) {
    if (u.label != UserLabel::kGenuine) continue;
    const std::vector<ItemIndex> hist = evaluation_history(u, state.config().max_len);
    const ad::Vector s = state.next_scores(hist);
    const std::span<const double> scores(s.data(), static_cast<std::size_t>(s.size()));
    std::fill(excluded.begin(), excluded.end(), 0);
    for (ItemIndex v : hist) excluded[static_cast<std::size_t>(v)] = 1;
    ++res.rec.users;
    const auto rank = rank_of(scores, excluded, u.test, catalog.lex_ranks());
    if (rank && *rank <= k_rec) {
      res.rec.hr += 1.0;
      res.rec.ndcg += 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
    }
    lists.push_back(rank_items(scores, excluded, k_tar, catalog.lex_ranks()));
    const auto idx = full.find(u.user_id);
    if (!idx) throw DataError("evaluate: user '" + u.user_id + "' missing from dataset");
    seen.push_back(full.at(*idx).items);
  }
  if (res.rec.users == 0) throw DataError("evaluate: no genuine users");
  res.rec.hr /= static_cast<double>(res.rec.users);
  res.rec.ndcg /= static_cast<double>(res.rec.users);
  if (!targets.empty()) res.target = target_metrics(lists, seen, targets, k_tar);
  return res;
}

std::optional<double> consistency(double attacked, double clean) {
  if (clean == 0.0) return std::nullopt;
  return 1.0 - std::abs(attacked - clean) / clean;
}

// --- pipeline ---------------------------------------------------------------------------

namespace {

int total_rec_epochs(const ExperimentConfig& cfg) {
  return cfg.schedule.rounds * cfg.schedule.rec_epochs + cfg.schedule.final_rec_epochs;
}

TrainOptions train_options(const ExperimentConfig& cfg) {
  TrainOptions t;
  t.epochs = total_rec_epochs(cfg);
  t.lr = cfg.model.lr;
  t.batch_size = cfg.model.batch_size;
  t.negatives = cfg.model.negatives;
  t.exact_bound = cfg.model.exact_bound;
  return t;
}

RecommenderConfig rec_config(const ExperimentConfig& cfg) {
  RecommenderConfig rc = cfg.model.rec;
  rc.max_len = cfg.max_len;
  return rc;
}

RecommenderState fresh_recommender(const ExperimentConfig& cfg, const ItemCatalog& catalog,
                                   EmbeddingProvider* provider) {
  std::optional<ad::Matrix> text;
  if (cfg.model.rec.encoder == EncoderMode::kText) {
    if (provider == nullptr) throw ConfigError("text encoder needs a provider");
    text = item_text_features(catalog, *provider);
  }
  return RecommenderState::create(rec_config(cfg), static_cast<int>(catalog.size()),
                                  derive_seed(cfg.seed, "rec_init"), std::move(text));
}

std::string scenario_of(const InteractionDataset& ds) {
  return ds.scenario().empty() ? std::string("item recommendation") : ds.scenario();
}

std::vector<std::size_t> histogram(std::span<const double> p) {
  std::vector<std::size_t> h(kHistogramBins, 0);
  for (double v : p) {
    auto b = static_cast<int>(std::floor(v * kHistogramBins));
    h[static_cast<std::size_t>(std::clamp(b, 0, kHistogramBins - 1))] += 1;
  }
  return h;
}

void label_means(const DataSplit& split, std::span<const double> values, double& genuine,
                 double& fraud) {
  double g = 0.0, f = 0.0;
  std::size_t ng = 0, nf = 0;
  for (std::size_t i = 0; i < split.users.size(); ++i) {
    if (split.users[i].label == UserLabel::kGenuine) {
      g += values[i];
      ++ng;
    } else {
      f += values[i];
      ++nf;
    }
  }
  genuine = ng ? g / static_cast<double>(ng) : 0.0;
  fraud = nf ? f / static_cast<double>(nf) : 0.0;
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  PreparedData d;
  if (cfg.dataset.source == "synthetic") {
    auto [catalog, ds] = generate_synthetic(cfg.dataset.synthetic, derive_seed(cfg.seed, "data"));
    d.catalog = std::move(catalog);
    d.clean = std::move(ds);
  } else {
    d.catalog = load_catalog(cfg.dataset.catalog);
    d.clean = load_interactions(cfg.dataset.interactions, d.catalog, cfg.dataset.min_interactions,
                                cfg.dataset.scenario.empty() ? "item recommendation"
                                                             : cfg.dataset.scenario);
  }

  const AttackSettings& a = cfg.attack;
  if (!a.targets.empty()) {
    for (const std::string& id : a.targets) d.targets.push_back(d.catalog.index_of(id));
    return d;
  }
  const auto n_targets = static_cast<std::size_t>(a.n_targets);
  if (n_targets >= d.catalog.size()) throw ConfigError("attack.n_targets exceeds the catalog");
  // Popularity from genuine users only.
  std::vector<std::int64_t> counts(d.catalog.size(), 0);
  for (const UserRecord& u : d.clean.users()) {
    if (u.label != UserLabel::kGenuine) continue;
    for (ItemIndex v : u.items) ++counts[static_cast<std::size_t>(v)];
  }
  std::vector<ItemIndex> order(d.catalog.size());
  std::iota(order.begin(), order.end(), 0);
  const bool popular = a.target_mode == "popular";
  std::sort(order.begin(), order.end(), [&](ItemIndex x, ItemIndex y) {
    if (counts[x] != counts[y]) return popular ? counts[x] > counts[y] : counts[x] < counts[y];
    return d.catalog.lex_rank(x) < d.catalog.lex_rank(y);
  });
  if (!popular) {
    // Sample among never-interacted items when enough exist.
    std::vector<ItemIndex> cold;
    for (ItemIndex v : order) {
      if (counts[v] == 0) cold.push_back(v);
    }
    if (cold.size() >= n_targets) {
      std::mt19937_64 rng(derive_seed(cfg.seed, "targets"));
      std::shuffle(cold.begin(), cold.end(), rng);
      cold.resize(n_targets);
      std::sort(cold.begin(), cold.end());
      d.targets = std::move(cold);
      return d;
    }
  }
  d.targets.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_targets));
  return d;
}

CleanReference train_clean_reference(const ExperimentConfig& cfg, const PreparedData& data) {
  std::unique_ptr<EmbeddingProvider> provider;
  if (cfg.model.rec.encoder == EncoderMode::kText) provider = make_provider(cfg.provider);
  const DataSplit split = split_leave_one_out(data.clean, cfg.max_len);
  RecommenderState state = fresh_recommender(cfg, data.catalog, provider.get());
  RecommenderTrainer trainer(state, train_options(cfg), derive_seed(cfg.seed, "rec_train"));
  for (int e = 0; e < total_rec_epochs(cfg); ++e) trainer.train_epoch(split, {});
  EvaluationResult m = evaluate_all(state, split, data.clean, data.catalog, data.targets, cfg.metrics);
  return CleanReference{std::move(state), m};
}

RunArtifacts run_pipeline(const ExperimentConfig& cfg, const PreparedData& data,
                          const CleanReference* clean, const std::filesystem::path* snapshot_dir) {
  cfg.validate();
  const bool needs_provider = cfg.mode != RunMode::kBackbone ||
                              cfg.model.rec.encoder == EncoderMode::kText;
  std::unique_ptr<EmbeddingProvider> provider;
  if (needs_provider) provider = make_provider(cfg.provider);

  std::optional<CleanReference> local_clean;
  if (clean == nullptr) {
    local_clean = train_clean_reference(cfg, data);
    clean = &*local_clean;
  }

  MetricsReport report;
  report.mode = std::string(to_string(cfg.mode));
  report.seed = cfg.seed;
  report.config_digest = config_digest(cfg);
  report.k = cfg.metrics;
  for (ItemIndex t : data.targets) report.targets.push_back(data.catalog.id_of(t));
  report.clean = clean->metrics;

  InteractionDataset poisoned = data.clean;
  if (cfg.attack.enabled) {
    AttackConfig ac;
    ac.kind = cfg.attack.kind;
    ac.budget_fraction = cfg.attack.budget;
    ac.targets = data.targets;
    ac.seed = derive_seed(cfg.seed, "attack");
    ac.lengths = cfg.attack.lengths;
    ac.popular_fraction = cfg.attack.popular_fraction;
    const auto profiles = generate_attack(data.clean, data.catalog, ac, &clean->state);
    report.n_injected = profiles.size();
    poisoned = inject(data.clean, profiles);
  } else {
    report.n_injected = poisoned.count(UserLabel::kFraudster);
  }
  const DataSplit split = split_leave_one_out(poisoned, cfg.max_len);
  report.n_users = split.users.size();

  RecommenderState state = fresh_recommender(cfg, data.catalog, provider.get());
  RecommenderTrainer trainer(state, train_options(cfg), derive_seed(cfg.seed, "rec_train"));

  std::vector<std::string> ids;
  ids.reserve(split.users.size());
  for (const UserSplit& u : split.users) ids.push_back(u.user_id);
  WeightPool pool(ids, cfg.calibrator.xi_hat);
  std::vector<double> weights = to_weights(pool);
  std::vector<double> final_scores;
  std::optional<CalibratorParams> calibrator;

  if (cfg.mode == RunMode::kBackbone) {
    for (int e = 0; e < total_rec_epochs(cfg); ++e) trainer.train_epoch(split, weights);
  } else {
    const std::string scenario = scenario_of(poisoned);
    const SupervisedSet known = make_known_fraudsters(poisoned, data.catalog,
                                                      derive_seed(cfg.seed, "supervised"),
                                                      cfg.supervised);
    report.n_supervised = known.users.size();

    std::vector<CalibratorSample> train(split.users.size()), atk(known.users.size());
    for (std::size_t u = 0; u < split.users.size(); ++u) {
      train[u].embedding = provider->embed(
          build_prompt_text(split.users[u].train, data.catalog, scenario, cfg.prompt_items));
    }
    for (std::size_t u = 0; u < known.users.size(); ++u) {
      atk[u].embedding = provider->embed(
          build_prompt_text(known.users[u].items, data.catalog, scenario, cfg.prompt_items));
    }

    CalibratorConfig cc;
    cc.d = cfg.model.rec.dim;
    cc.provider_dim = provider->dimension();
    cc.max_len = cfg.max_len;
    cc.hidden = cfg.calibrator.hidden;
    calibrator = CalibratorParams::create(cc, derive_seed(cfg.seed, "lct_init"));

    if (cfg.mode == RunMode::kLlm4Dec) {
      CalibratorTrainOptions opt;
      opt.lr = cfg.llm4dec.lr;
      opt.batch_size = cfg.calibrator.batch_size;
      opt.lambda1 = cfg.llm4dec.lambda;
      opt.entropy_form = cfg.calibrator.entropy_form;
      CalibratorTrainer ct(*calibrator, CalibratorMode::kLlm4Dec, opt,
                           derive_seed(cfg.seed, "lct_train"));
      RoundRecord rec;
      for (int e = 0; e < cfg.llm4dec.epochs; ++e) rec.lct = ct.train_epoch(atk, train);
      final_scores = score_users(*calibrator, CalibratorMode::kLlm4Dec, train).p;
      if (cfg.llm4dec.filter == "soft") {
        for (std::size_t u = 0; u < weights.size(); ++u) weights[u] = 1.0 - final_scores[u];
      } else {
        std::vector<double> sorted = final_scores;
        std::sort(sorted.begin(), sorted.end());
        const auto idx = static_cast<std::size_t>(
            std::ceil(cfg.llm4dec.quantile * static_cast<double>(sorted.size()))) - 1;
        const double cut = sorted[std::min(idx, sorted.size() - 1)];
        for (std::size_t u = 0; u < weights.size(); ++u) weights[u] = final_scores[u] > cut ? 0.0 : 1.0;
      }
      rec.round = 0;
      rec.mu_o = adaptive_threshold(final_scores);
      for (double p : final_scores) (p > rec.mu_o ? rec.above : rec.below) += 1;
      rec.weights.mean = std::accumulate(weights.begin(), weights.end(), 0.0) /
                         static_cast<double>(weights.size());
      rec.weights.min = *std::min_element(weights.begin(), weights.end());
      rec.weights.max = *std::max_element(weights.begin(), weights.end());
      rec.weights.xi_sum = pool.xi_sum();
      label_means(split, weights, rec.genuine_mean_w, rec.fraud_mean_w);
      label_means(split, final_scores, rec.genuine_mean_p, rec.fraud_mean_p);
      rec.p_histogram = histogram(final_scores);
      report.rounds.push_back(rec);
      if (snapshot_dir != nullptr) {
        write_snapshot(*snapshot_dir / "round_00.tsv", pool, final_scores, rec.mu_o);
      }
      for (int e = 0; e < total_rec_epochs(cfg); ++e) trainer.train_epoch(split, weights);
    } else {
      CalibratorTrainOptions opt;
      opt.lr = cfg.calibrator.lr;
      opt.batch_size = cfg.calibrator.batch_size;
      opt.lambda1 = cfg.calibrator.lambda1;
      opt.lambda2 = cfg.calibrator.lambda2;
      opt.entropy_form = cfg.calibrator.entropy_form;
      std::optional<CalibratorTrainer> ct;
      ct.emplace(*calibrator, CalibratorMode::kLct, opt, derive_seed(cfg.seed, "lct_train"));
      for (int r = 0; r < cfg.schedule.rounds; ++r) {
        if (cfg.schedule.lct_reset && r > 0) {
          const std::string tag = "/" + std::to_string(r);
          ct.reset();
          *calibrator = CalibratorParams::create(cc, derive_seed(cfg.seed, "lct_init" + tag));
          ct.emplace(*calibrator, CalibratorMode::kLct, opt, derive_seed(cfg.seed, "lct_train" + tag));
        }
        for (int e = 0; e < cfg.schedule.rec_epochs; ++e) trainer.train_epoch(split, weights);
        for (std::size_t u = 0; u < split.users.size(); ++u) {
          train[u].feedback = recommender_feedback(state, split.users[u].train);
        }
        for (std::size_t u = 0; u < known.users.size(); ++u) {
          atk[u].feedback = recommender_feedback(state, known.users[u].items);
        }
        RoundRecord rec;
        rec.round = r + 1;
        for (int e = 0; e < cfg.schedule.lct_epochs; ++e) rec.lct = ct->train_epoch(atk, train);
        const ScoredUsers scored = score_users(*calibrator, CalibratorMode::kLct, train);
        final_scores = scored.p;
        rec.summary_spread = summary_spread(scored.summaries);
        if (rec.summary_spread < cfg.calibrator.collapse_floor) {
          report.warnings.push_back("round " + std::to_string(r + 1) +
                                    ": calibrator summaries collapsed (spread " +
                                    std::to_string(rec.summary_spread) + ")");
        }
        rec.mu_o = adaptive_threshold(final_scores);
        CompensationStats cs;
        pool = compensate(pool, final_scores, rec.mu_o, &cs);
        if (cs.skipped) {
          report.warnings.push_back("round " + std::to_string(r + 1) + ": compensation skipped");
        }
        weights = to_weights(pool);
        rec.above = cs.above;
        rec.below = cs.below;
        rec.weights = summarize_weights(pool);
        label_means(split, weights, rec.genuine_mean_w, rec.fraud_mean_w);
        label_means(split, final_scores, rec.genuine_mean_p, rec.fraud_mean_p);
        rec.p_histogram = histogram(final_scores);
        report.rounds.push_back(rec);
        if (snapshot_dir != nullptr) {
          char name[32];
          std::snprintf(name, sizeof(name), "round_%02d.tsv", r + 1);
          write_snapshot(*snapshot_dir / name, pool, final_scores, rec.mu_o);
        }
      }
      for (int e = 0; e < cfg.schedule.final_rec_epochs; ++e) trainer.train_epoch(split, weights);
    }
  }

  report.metrics = evaluate_all(state, split, poisoned, data.catalog, data.targets, cfg.metrics);
  report.rc_hr = consistency(report.metrics.rec.hr, report.clean.rec.hr);
  report.rc_ndcg = consistency(report.metrics.rec.ndcg, report.clean.rec.ndcg);
  return RunArtifacts{std::move(report), std::move(state), std::move(calibrator), std::move(pool),
                      std::move(final_scores)};
}

RunArtifacts run_pipeline(const ExperimentConfig& cfg) {
  const PreparedData data = prepare_data(cfg);
  return run_pipeline(cfg, data);
}

// --- reports ------------------------------------------------------------------------------

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json eval_json(const EvaluationResult& e) {
  return json{{"hr", e.rec.hr},
              {"ndcg", e.rec.ndcg},
              {"t_hr", e.target.hr},
              {"t_ndcg", e.target.ndcg},
              {"users", e.rec.users}};
}

EvaluationResult eval_from(const json& j) {
  EvaluationResult e;
  e.rec.hr = j.at("hr").get<double>();
  e.rec.ndcg = j.at("ndcg").get<double>();
  e.rec.users = j.at("users").get<std::size_t>();
  e.target.hr = j.at("t_hr").get<double>();
  e.target.ndcg = j.at("t_ndcg").get<double>();
  return e;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string svg_bars(const std::string& title, const std::vector<std::string>& labels,
                     const std::vector<std::vector<double>>& series,
                     const std::vector<std::string>& series_names, double y_max) {
  static const char* kColors[] = {"#4C72B0", "#DD8452", "#55A868", "#C44E52"};
  const double width = 640, height = 360, left = 50, right = 20, top = 40, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const std::size_t groups = labels.size();
  const std::size_t per = series.size();
  const double group_w = plot_w / static_cast<double>(std::max<std::size_t>(groups, 1));
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(per, 1));
  if (!(y_max > 0)) y_max = 1.0;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
    << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w
    << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << left - 5 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << short_fmt(y_max)
    << "</text>\n";
  s << "<text x=\"" << left - 5 << "\" y=\"" << top + plot_h << "\" text-anchor=\"end\">0</text>\n";
  for (std::size_t g = 0; g < groups; ++g) {
    const double gx = left + static_cast<double>(g) * group_w + group_w * 0.1;
    for (std::size_t k = 0; k < per; ++k) {
      const double v = std::clamp(series[k][g] / y_max, 0.0, 1.0);
      const double h = v * plot_h;
      s << "<rect x=\"" << gx + static_cast<double>(k) * bar_w << "\" y=\"" << top + plot_h - h
        << "\" width=\"" << bar_w << "\" height=\"" << h << "\" fill=\"" << kColors[k % 4] << "\"/>\n";
    }
    if (groups <= 24 || g % 2 == 0) {
      s << "<text x=\"" << gx + group_w * 0.4 << "\" y=\"" << top + plot_h + 14
        << "\" text-anchor=\"middle\">" << labels[g] << "</text>\n";
    }
  }
  for (std::size_t k = 0; k < series_names.size(); ++k) {
    const double lx = left + 10 + static_cast<double>(k) * 140;
    s << "<rect x=\"" << lx << "\" y=\"" << height - 25 << "\" width=\"10\" height=\"10\" fill=\""
      << kColors[k % 4] << "\"/>\n";
    s << "<text x=\"" << lx + 14 << "\" y=\"" << height - 16 << "\">" << series_names[k] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

json to_json(const MetricsReport& r) {
  json rounds = json::array();
  for (const RoundRecord& x : r.rounds) {
    rounds.push_back(json{{"round", x.round},
                          {"mu_o", x.mu_o},
                          {"above", x.above},
                          {"below", x.below},
                          {"weight_mean", x.weights.mean},
                          {"weight_min", x.weights.min},
                          {"weight_max", x.weights.max},
                          {"xi_sum", x.weights.xi_sum},
                          {"genuine_mean_w", x.genuine_mean_w},
                          {"fraud_mean_w", x.fraud_mean_w},
                          {"genuine_mean_p", x.genuine_mean_p},
                          {"fraud_mean_p", x.fraud_mean_p},
                          {"p_histogram", x.p_histogram},
                          {"lct_loss", x.lct.loss},
                          {"lct_fraud", x.lct.fraud},
                          {"lct_entropy", x.lct.entropy},
                          {"lct_alignment", x.lct.alignment},
                          {"summary_spread", x.summary_spread}});
  }
  return json{{"schema_version", kReportSchemaVersion},
              {"mode", r.mode},
              {"provenance", {{"config_digest", r.config_digest}, {"seed", r.seed}}},
              {"k", {{"rec", r.k.k_rec}, {"target", r.k.k_target}}},
              {"targets", r.targets},
              {"n_users", r.n_users},
              {"n_injected", r.n_injected},
              {"n_supervised", r.n_supervised},
              {"metrics", eval_json(r.metrics)},
              {"clean", eval_json(r.clean)},
              {"rc_hr", optional_json(r.rc_hr)},
              {"rc_ndcg", optional_json(r.rc_ndcg)},
              {"rounds", rounds},
              {"warnings", r.warnings}};
}

MetricsReport report_from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw DataError("unsupported report schema version");
    }
    MetricsReport r;
    r.mode = j.at("mode").get<std::string>();
    r.config_digest = j.at("provenance").at("config_digest").get<std::string>();
    r.seed = j.at("provenance").at("seed").get<std::uint64_t>();
    r.k.k_rec = j.at("k").at("rec").get<int>();
    r.k.k_target = j.at("k").at("target").get<int>();
    r.targets = j.at("targets").get<std::vector<std::string>>();
    r.n_users = j.at("n_users").get<std::size_t>();
    r.n_injected = j.at("n_injected").get<std::size_t>();
    r.n_supervised = j.at("n_supervised").get<std::size_t>();
    r.metrics = eval_from(j.at("metrics"));
    r.clean = eval_from(j.at("clean"));
    r.rc_hr = optional_from(j.at("rc_hr"));
    r.rc_ndcg = optional_from(j.at("rc_ndcg"));
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const json& x : j.at("rounds")) {
      RoundRecord rec;
      rec.round = x.at("round").get<int>();
      rec.mu_o = x.at("mu_o").get<double>();
      rec.above = x.at("above").get<std::size_t>();
      rec.below = x.at("below").get<std::size_t>();
      rec.weights.mean = x.at("weight_mean").get<double>();
      rec.weights.min = x.at("weight_min").get<double>();
      rec.weights.max = x.at("weight_max").get<double>();
      rec.weights.xi_sum = x.at("xi_sum").get<double>();
      rec.genuine_mean_w = x.at("genuine_mean_w").get<double>();
      rec.fraud_mean_w = x.at("fraud_mean_w").get<double>();
      rec.genuine_mean_p = x.at("genuine_mean_p").get<double>();
      rec.fraud_mean_p = x.at("fraud_mean_p").get<double>();
      rec.p_histogram = x.at("p_histogram").get<std::vector<std::size_t>>();
      rec.lct.loss = x.at("lct_loss").get<double>();
      rec.lct.fraud = x.at("lct_fraud").get<double>();
      rec.lct.entropy = x.at("lct_entropy").get<double>();
      rec.lct.alignment = x.at("lct_alignment").get<double>();
      rec.summary_spread = x.at("summary_spread").get<double>();
      r.rounds.push_back(std::move(rec));
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

std::vector<std::filesystem::path> emit_report(const MetricsReport& report,
                                               const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "plots", ec);
  if (ec) throw DataError("cannot create report directory '" + dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> files;

  files.push_back(dir / "report.json");
  write_text(files.back(), to_json(report).dump(2) + "\n");

  std::ostringstream traj;
  traj << "round\tmu_o\tabove\tbelow\tweight_mean\tweight_min\tweight_max\txi_sum\tgenuine_mean_w"
          "\tfraud_mean_w\tgenuine_mean_p\tfraud_mean_p\n";
  for (const RoundRecord& r : report.rounds) {
    traj << r.round << '\t' << fmt(r.mu_o) << '\t' << r.above << '\t' << r.below << '\t'
         << fmt(r.weights.mean) << '\t' << fmt(r.weights.min) << '\t' << fmt(r.weights.max) << '\t'
         << fmt(r.weights.xi_sum) << '\t' << fmt(r.genuine_mean_w) << '\t' << fmt(r.fraud_mean_w)
         << '\t' << fmt(r.genuine_mean_p) << '\t' << fmt(r.fraud_mean_p) << '\n';
  }
  files.push_back(dir / "weight_trajectory.tsv");
  write_text(files.back(), traj.str());

  for (const RoundRecord& r : report.rounds) {
    std::vector<std::string> labels;
    std::vector<double> counts;
    double peak = 0.0;
    for (int b = 0; b < kHistogramBins; ++b) {
      labels.push_back(short_fmt(static_cast<double>(b) / kHistogramBins).substr(0, 4));
      counts.push_back(static_cast<double>(r.p_histogram[static_cast<std::size_t>(b)]));
      peak = std::max(peak, counts.back());
    }
    char name[40];
    std::snprintf(name, sizeof(name), "p_hist_round_%02d.svg", r.round);
    files.push_back(dir / "plots" / name);
    write_text(files.back(), svg_bars("Fraud score distribution, round " + std::to_string(r.round),
                                      labels, {counts}, {"users"}, peak));
  }

  const std::vector<std::string> labels = {
      "HR@" + std::to_string(report.k.k_rec), "NDCG@" + std::to_string(report.k.k_rec),
      "T-HR@" + std::to_string(report.k.k_target), "T-NDCG@" + std::to_string(report.k.k_target)};
  const std::vector<double> run = {report.metrics.rec.hr, report.metrics.rec.ndcg,
                                   report.metrics.target.hr, report.metrics.target.ndcg};
  const std::vector<double> ref = {report.clean.rec.hr, report.clean.rec.ndcg,
                                   report.clean.target.hr, report.clean.target.ndcg};
  double peak = 0.0;
  for (double v : run) peak = std::max(peak, v);
  for (double v : ref) peak = std::max(peak, v);
  files.push_back(dir / "plots" / "metrics.svg");
  write_text(files.back(), svg_bars("Metrics (" + report.mode + ")", labels, {run, ref},
                                    {report.mode, "clean reference"}, peak > 0 ? peak * 1.1 : 1.0));
  return files;
}

std::vector<std::filesystem::path> write_run(const RunArtifacts& run, const ExperimentConfig& cfg,
                                             const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files = emit_report(run.report, dir);
  files.push_back(dir / "config.json");
  write_text(files.back(), to_json(cfg).dump(2) + "\n");
  files.push_back(dir / "recommender.ckpt");
  run.state.save(files.back());
  if (run.calibrator) {
    files.push_back(dir / "calibrator.ckpt");
    run.calibrator->save(files.back());
  }
  std::ostringstream w;
  w << "user_id\txi\tw\tp\n";
  const std::vector<double> weights = to_weights(run.pool);
  for (std::size_t i = 0; i < run.pool.size(); ++i) {
    w << run.pool.user_ids()[i] << '\t' << fmt(run.pool.xi()[i]) << '\t' << fmt(weights[i]) << '\t'
      << (run.final_scores.empty() ? std::string("") : fmt(run.final_scores[i])) << '\n';
  }
  files.push_back(dir / "weights.tsv");
  write_text(files.back(), w.str());
  return files;
}

}  // namespace lorec
