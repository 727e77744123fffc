#include "lorec/llm_bridge.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "lorec/errors.hpp"

namespace lorec {

namespace {

constexpr std::string_view kPromptHead = "In ";
constexpr std::string_view kPromptMiddle = ", a user's interaction sequence is as follows: ";
constexpr std::string_view kPromptTail =
    ". Please assess the likelihood of this user being a fraudster.";
constexpr std::string_view kFieldSep = "; ";

constexpr char kCacheMagic[8] = {'L', 'O', 'R', 'E', 'C', 'E', 'M', 'B'};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ splitmix64(seed);
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

}  // namespace

// --- prompts ------------------------------------------------------------------------

std::string build_prompt_text(std::span<const ItemIndex> sequence, const ItemCatalog& catalog,
                              std::string_view scenario, std::size_t max_items) {
  if (sequence.empty()) throw DataError("build_prompt: empty sequence");
  if (max_items < 1) throw ConfigError("build_prompt: max_items must be >= 1");
  if (sequence.size() > max_items) sequence = sequence.subspan(sequence.size() - max_items);
  std::string out;
  out.reserve(64 + sequence.size() * 40);
  out += kPromptHead;
  out += scenario;
  out += kPromptMiddle;
  bool first = true;
  for (ItemIndex v : sequence) {
    const ItemRecord& r = catalog.at(v);
    if (!first) out += kFieldSep;
    first = false;
    out += r.title;
    out += kFieldSep;
    out += r.category;
  }
  out += kPromptTail;
  return out;
}

Prompt build_prompt(const UserRecord& user, const ItemCatalog& catalog, std::string_view scenario,
                    std::size_t max_items) {
  Prompt p;
  p.text = build_prompt_text(user.items, catalog, scenario, max_items);
  p.user_id = user.user_id;
  p.item_count = std::min(user.items.size(), max_items);
  return p;
}

ParsedPrompt parse_prompt(std::string_view text) {
  if (text.substr(0, kPromptHead.size()) != kPromptHead) throw DataError("prompt: bad prefix");
  const std::size_t mid = text.find(kPromptMiddle);
  if (mid == std::string_view::npos) throw DataError("prompt: missing sequence clause");
  if (text.size() < kPromptTail.size() ||
      text.substr(text.size() - kPromptTail.size()) != kPromptTail) {
    throw DataError("prompt: missing instruction");
  }
  ParsedPrompt out;
  out.scenario = std::string(text.substr(kPromptHead.size(), mid - kPromptHead.size()));
  const std::size_t body_start = mid + kPromptMiddle.size();
  const std::size_t body_end = text.size() - kPromptTail.size();
  if (body_end < body_start) throw DataError("prompt: truncated body");
  std::string_view body = text.substr(body_start, body_end - body_start);
  std::vector<std::string> fields;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = body.find(kFieldSep, pos);
    if (next == std::string_view::npos) {
      fields.emplace_back(body.substr(pos));
      break;
    }
    fields.emplace_back(body.substr(pos, next - pos));
    pos = next + kFieldSep.size();
  }
  if (fields.size() % 2 != 0) throw DataError("prompt: unpaired title/category field");
  for (std::size_t i = 0; i < fields.size(); i += 2) {
    out.features.emplace_back(fields[i], fields[i + 1]);
  }
  return out;
}

// --- mock provider ----------------------------------------------------------------

MockProvider::MockProvider(int dimension, std::uint64_t seed, int min_n, int max_n)
    : dimension_(dimension), seed_(seed), min_n_(min_n), max_n_(max_n) {
  if (dimension < 1) throw ConfigError("mock provider: dimension must be >= 1");
  if (min_n < 1 || max_n < min_n) throw ConfigError("mock provider: bad n-gram range");
}

ad::Vector MockProvider::embed(std::string_view text) {
  ad::Vector v = ad::Vector::Zero(dimension_);
  for (int n = min_n_; n <= max_n_; ++n) {
    if (text.size() < static_cast<std::size_t>(n)) break;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= text.size(); ++i) {
      const std::uint64_t h = fnv1a(text.substr(i, static_cast<std::size_t>(n)), seed_);
      const auto slot = static_cast<Eigen::Index>((h >> 1) % static_cast<std::uint64_t>(dimension_));
      v(slot) += (h & 1U) ? 1.0 : -1.0;
    }
  }
  const double norm = v.norm();
  if (norm > 0.0) {
    v /= norm;
  } else {
    // Text too short for any n-gram: a fixed unit vector keyed by the text.
    v(static_cast<Eigen::Index>(fnv1a(text, seed_) % static_cast<std::uint64_t>(dimension_))) = 1.0;
  }
  return v;
}

// --- cache --------------------------------------------------------------------------

EmbeddingCache::EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::string EmbeddingCache::digest(std::string_view text) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw ProviderError("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::filesystem::path EmbeddingCache::path_for(std::string_view text) const {
  return dir_ / (digest(text) + ".emb");
}

std::optional<ad::Vector> EmbeddingCache::get(std::string_view text) const {
  const auto path = path_for(text);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[8];
  std::uint32_t dim = 0;
  std::uint64_t text_len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  in.read(reinterpret_cast<char*>(&text_len), sizeof(text_len));
  if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0 || text_len > (1ULL << 30)) {
    throw ProviderError("corrupt cache entry '" + path.string() + "'");
  }
  std::string stored(text_len, '\0');
  in.read(stored.data(), static_cast<std::streamsize>(text_len));
  if (!in) throw ProviderError("corrupt cache entry '" + path.string() + "'");
  if (stored != text) {
    throw ProviderError("cache digest collision at '" + path.string() + "'");
  }
  ad::Vector v(dim);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * dim));
  if (!in) throw ProviderError("corrupt cache entry '" + path.string() + "'");
  return v;
}

void EmbeddingCache::put(std::string_view text, const ad::Vector& v) const {
  std::filesystem::create_directories(dir_);
  const auto path = path_for(text);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ProviderError("cannot write cache entry '" + tmp.string() + "'");
    const auto dim = static_cast<std::uint32_t>(v.size());
    const auto text_len = static_cast<std::uint64_t>(text.size());
    out.write(kCacheMagic, sizeof(kCacheMagic));
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    out.write(reinterpret_cast<const char*>(&text_len), sizeof(text_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(sizeof(double) * dim));
    if (!out) throw ProviderError("failed writing cache entry '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

// --- remote provider ----------------------------------------------------------------

namespace {

std::string env_or(const std::string& name, const std::string& fallback) {
  if (name.empty()) return fallback;
  const char* v = std::getenv(name.c_str());
  return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

// Splits "scheme://host[:port]/path" into base and path.
std::pair<std::string, std::string> split_url(const std::string& url) {
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("remote endpoint must be a URL: " + url);
  const std::size_t path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

ad::Vector parse_embedding(const std::string& body) {
  const nlohmann::json j = nlohmann::json::parse(body);
  const nlohmann::json* arr = nullptr;
  if (j.contains("embedding")) {
    arr = &j.at("embedding");
  } else if (j.contains("data") && j.at("data").is_array() && !j.at("data").empty() &&
             j.at("data").at(0).contains("embedding")) {
    arr = &j.at("data").at(0).at("embedding");
  }
  if (arr == nullptr || !arr->is_array()) throw ProviderError("response carries no embedding");
  ad::Vector v(static_cast<Eigen::Index>(arr->size()));
  for (std::size_t i = 0; i < arr->size(); ++i) v(static_cast<Eigen::Index>(i)) = arr->at(i).get<double>();
  return v;
}

}  // namespace

RemoteProvider::RemoteProvider(RemoteSettings settings)
    : settings_(std::move(settings)),
      endpoint_(env_or(settings_.endpoint_env, settings_.endpoint)),
      credential_(env_or(settings_.credential_env, "")),
      cache_(settings_.cache_dir) {
  if (settings_.dimension < 1) throw ConfigError("remote provider: dimension must be >= 1");
  if (settings_.max_retries < 0) throw ConfigError("remote provider: max_retries must be >= 0");
}

std::mutex& RemoteProvider::key_mutex(const std::string& key) {
  std::lock_guard<std::mutex> lock(table_mutex_);
  auto& slot = key_mutexes_[key];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

ad::Vector RemoteProvider::embed(std::string_view text) {
  const std::string key = EmbeddingCache::digest(text);
  std::lock_guard<std::mutex> lock(key_mutex(key));
  if (auto hit = cache_.get(text)) {
    if (hit->size() != settings_.dimension) throw ProviderError("cached vector has wrong dimension");
    return *hit;
  }
  ad::Vector v = fetch(text);
  cache_.put(text, v);
  return v;
}

ad::Vector RemoteProvider::fetch(std::string_view text) {
  if (endpoint_.empty()) {
    throw ProviderError("no remote endpoint: set $" + settings_.endpoint_env);
  }
  const auto [base, path] = split_url(endpoint_);
  httplib::Client client(base);
  const auto secs = static_cast<time_t>(settings_.timeout_s);
  const auto usecs = static_cast<time_t>((settings_.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!credential_.empty()) headers.emplace("Authorization", "Bearer " + credential_);
  const std::string payload = nlohmann::json{{"input", std::string(text)}}.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= settings_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
    ++network_calls_;
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status >= 400 && res->status < 500 && res->status != 429) break;
      continue;
    }
    ad::Vector v;
    try {
      v = parse_embedding(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError(std::string("malformed embedding response: ") + e.what());
    }
    if (v.size() != settings_.dimension) {
      throw ProviderError("remote embedding has dimension " + std::to_string(v.size()) +
                          ", expected " + std::to_string(settings_.dimension));
    }
    if (!v.allFinite()) throw ProviderError("remote embedding is not finite");
    return v;
  }
  throw ProviderError("remote embedding failed after " + std::to_string(settings_.max_retries + 1) +
                      " attempt(s): " + last_error);
}

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& config) {
  if (config.kind == "mock") return std::make_unique<MockProvider>(config.dimension, config.seed);
  if (config.kind == "remote") {
    RemoteSettings s = config.remote;
    if (s.dimension == 0) s.dimension = config.dimension;
    return std::make_unique<RemoteProvider>(std::move(s));
  }
  throw ConfigError("unknown provider kind '" + config.kind + "'");
}

ad::Matrix embed_users(EmbeddingProvider& provider, std::span<const UserRecord> users,
                       const ItemCatalog& catalog, std::string_view scenario,
                       std::size_t max_items) {
  ad::Matrix out(static_cast<Eigen::Index>(users.size()), provider.dimension());
  for (std::size_t u = 0; u < users.size(); ++u) {
    const std::string text = build_prompt_text(users[u].items, catalog, scenario, max_items);
    ad::Vector v;
    try {
      v = provider.embed(text);
    } catch (const ProviderError& e) {
      throw ProviderError("user '" + users[u].user_id + "': " + e.what());
    }
    if (v.size() != provider.dimension()) throw ProviderError("provider returned wrong dimension");
    out.row(static_cast<Eigen::Index>(u)) = v.transpose();
  }
  return out;
}

// --- DT block -----------------------------------------------------------------------

DTParams DTParams::create(int in_dim, int hidden, int out_dim, std::mt19937_64& rng) {
  if (in_dim < 1 || hidden < 1 || out_dim < 1) throw ConfigError("DT: dimensions must be >= 1");
  auto uniform = [&rng](int rows, int cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    ad::Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    }
    return ad::Param(std::move(m));
  };
  DTParams p;
  p.w1 = uniform(in_dim, hidden, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  p.b1 = ad::Param(ad::Matrix::Zero(1, hidden));
  p.w2 = uniform(hidden, out_dim, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.b2 = ad::Param(ad::Matrix::Zero(1, out_dim));
  return p;
}

ad::Var dt_transform(ad::Tape& tape, const DTParams& params, ad::Var v, bool trainable) {
  if (v.cols() != params.in_dim()) {
    throw std::invalid_argument("dt_transform: input has " + std::to_string(v.cols()) +
                                " columns, expected " + std::to_string(params.in_dim()));
  }
  ad::Var h = ad::tanh(ad::affine(v, tape.bind(params.w1, trainable), tape.bind(params.b1, trainable)));
  return ad::affine(h, tape.bind(params.w2, trainable), tape.bind(params.b2, trainable));
}

ad::Vector dt_transform(const DTParams& params, const ad::Vector& v) {
  ad::Tape tape;
  ad::Var out = dt_transform(tape, params, tape.constant(v.transpose()), false);
  return out.value().transpose();
}

}  // namespace lorec
