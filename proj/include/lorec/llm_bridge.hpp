#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorec/autodiff.hpp"
#include "lorec/data.hpp"

namespace lorec {

struct Prompt {
  std::string text;
  std::string user_id;
  std::size_t item_count = 0;
};

// Fraud-assessment prompt over the most recent `max_items` interactions.
Prompt build_prompt(const UserRecord& user, const ItemCatalog& catalog, std::string_view scenario,
                    std::size_t max_items = 50);
std::string build_prompt_text(std::span<const ItemIndex> sequence, const ItemCatalog& catalog,
                              std::string_view scenario, std::size_t max_items = 50);

struct ParsedPrompt {
  std::string scenario;
  std::vector<std::pair<std::string, std::string>> features;  // (title, category)
};

// Inverse of build_prompt_text; throws DataError on text outside the grammar.
ParsedPrompt parse_prompt(std::string_view text);

// Frozen text embedder. Implementations must be safe for concurrent embed().
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dimension() const = 0;
  virtual ad::Vector embed(std::string_view text) = 0;
  virtual std::string kind() const = 0;
};

// Signed feature hashing of character n-grams, unit-normalized.
class MockProvider final : public EmbeddingProvider {
 public:
  explicit MockProvider(int dimension = 256, std::uint64_t seed = 0, int min_n = 3, int max_n = 5);
  int dimension() const override { return dimension_; }
  ad::Vector embed(std::string_view text) override;
  std::string kind() const override { return "mock"; }

 private:
  int dimension_;
  std::uint64_t seed_;
  int min_n_;
  int max_n_;
};

// On-disk vector cache: one file per SHA-256 digest of the text.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir);

  static std::string digest(std::string_view text);
  std::filesystem::path path_for(std::string_view text) const;
  std::optional<ad::Vector> get(std::string_view text) const;
  void put(std::string_view text, const ad::Vector& v) const;

 private:
  std::filesystem::path dir_;
};

struct RemoteSettings {
  std::string endpoint_env = "LOREC_EMBED_ENDPOINT";
  std::string credential_env = "LOREC_EMBED_TOKEN";
  std::string endpoint;  // used when the env var is unset
  int dimension = 0;
  double timeout_s = 30.0;
  int max_retries = 3;
  std::filesystem::path cache_dir = ".lorec_cache";
};

// HTTP embedding client. POSTs {"input": text} and accepts either
// {"embedding": [...]} or {"data": [{"embedding": [...]}]}.
class RemoteProvider final : public EmbeddingProvider {
 public:
  explicit RemoteProvider(RemoteSettings settings);
  int dimension() const override { return settings_.dimension; }
  ad::Vector embed(std::string_view text) override;
  std::string kind() const override { return "remote"; }

  std::size_t network_calls() const { return network_calls_.load(); }

 private:
  ad::Vector fetch(std::string_view text);
  std::mutex& key_mutex(const std::string& key);

  RemoteSettings settings_;
  std::string endpoint_;
  std::string credential_;
  EmbeddingCache cache_;
  std::atomic<std::size_t> network_calls_{0};
  std::mutex table_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> key_mutexes_;
};

struct ProviderConfig {
  std::string kind = "mock";
  int dimension = 256;
  std::uint64_t seed = 0;
  RemoteSettings remote;
};

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& config);

// Embeddings of every user's prompt, rows aligned with `users`.
ad::Matrix embed_users(EmbeddingProvider& provider, std::span<const UserRecord> users,
                       const ItemCatalog& catalog, std::string_view scenario,
                       std::size_t max_items = 50);

// Dimension transformation D -> hidden -> out with tanh between.
struct DTParams {
  ad::Param w1, b1, w2, b2;

  static DTParams create(int in_dim, int hidden, int out_dim, std::mt19937_64& rng);
  int in_dim() const { return static_cast<int>(w1.value.rows()); }
  int out_dim() const { return static_cast<int>(w2.value.cols()); }
};

ad::Var dt_transform(ad::Tape& tape, const DTParams& params, ad::Var v, bool trainable);
ad::Vector dt_transform(const DTParams& params, const ad::Vector& v);

}  // namespace lorec
