#include "doctest.h"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "lorec/attacks.hpp"
#include "lorec/errors.hpp"
#include "lorec/llm_bridge.hpp"
#include "support.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

using namespace lorec;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lorec_test_llm_" + name);
  fs::remove_all(p);
  return p;
}

// Local embedding endpoint. /ok answers {"embedding": [...]}, /wrapped the
// {"data": [...]} form, /flaky fails twice first, /bad returns garbage.
class FakeServer {
 public:
  explicit FakeServer(int dim) : dim_(dim) {
    auto vector_for = [this](const std::string& body) {
      const auto j = nlohmann::json::parse(body);
      MockProvider mock(dim_, 9);
      const ad::Vector v = mock.embed(j.at("input").get<std::string>());
      return std::vector<double>(v.data(), v.data() + v.size());
    };
    server_.Post("/ok", [this, vector_for](const httplib::Request& req, httplib::Response& res) {
      ++calls_;
      last_auth_ = req.get_header_value("Authorization");
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      res.set_content(nlohmann::json{{"embedding", vector_for(req.body)}}.dump(), "application/json");
    });
    server_.Post("/wrapped", [this, vector_for](const httplib::Request& req, httplib::Response& res) {
      ++calls_;
      nlohmann::json j = {{"data", {{{"embedding", vector_for(req.body)}}}}};
      res.set_content(j.dump(), "application/json");
    });
    server_.Post("/flaky", [this, vector_for](const httplib::Request& req, httplib::Response& res) {
      if (++calls_ <= 2) {
        res.status = 503;
        return;
      }
      res.set_content(nlohmann::json{{"embedding", vector_for(req.body)}}.dump(), "application/json");
    });
    server_.Post("/denied", [this](const httplib::Request&, httplib::Response& res) {
      ++calls_;
      res.status = 401;
    });
    server_.Post("/bad", [this](const httplib::Request&, httplib::Response& res) {
      ++calls_;
      res.set_content("not json", "text/plain");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& path) const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }
  int calls() const { return calls_.load(); }
  void reset() { calls_ = 0; }
  std::string last_auth() const { return last_auth_; }

 private:
  int dim_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> calls_{0};
  std::string last_auth_;
};

RemoteSettings remote_settings(const std::string& url, const fs::path& cache, int dim = 16) {
  RemoteSettings s;
  s.endpoint_env = "";
  s.credential_env = "LOREC_TEST_TOKEN";
  s.endpoint = url;
  s.dimension = dim;
  s.timeout_s = 5;
  s.max_retries = 3;
  s.cache_dir = cache;
  return s;
}

}  // namespace

TEST_CASE("prompt template and parser round-trip") {
  const ItemCatalog c({{"a", "Alpha Quest", "RPG", 0}, {"b", "Beta Race", "Racing", 0},
                       {"c", "Gamma", "", 0}});
  const std::vector<ItemIndex> seq{0, 1, 2, 1};
  const std::string text = build_prompt_text(seq, c, "game recommendation");
  CHECK(text ==
        "In game recommendation, a user's interaction sequence is as follows: Alpha Quest; RPG; "
        "Beta Race; Racing; Gamma; ; Beta Race; Racing. Please assess the likelihood of this user "
        "being a fraudster.");
  const ParsedPrompt parsed = parse_prompt(text);
  CHECK(parsed.scenario == "game recommendation");
  REQUIRE(parsed.features.size() == 4);
  CHECK(parsed.features[2] == std::pair<std::string, std::string>{"Gamma", ""});

  const Prompt p = build_prompt({"u", seq, UserLabel::kGenuine}, c, "news", 2);
  CHECK(p.item_count == 2);
  CHECK(parse_prompt(p.text).features.size() == 2);
  CHECK(parse_prompt(p.text).features[0].first == "Gamma");
  CHECK_THROWS_AS(parse_prompt("hello"), DataError);
  CHECK_THROWS_AS(build_prompt_text(std::vector<ItemIndex>{}, c, "x"), DataError);
}

TEST_CASE("prompt round-trip over synthetic users") {
  SyntheticSpec spec;
  spec.n_users = 60;
  spec.n_items = 90;
  spec.n_themes = 4;
  auto [catalog, ds] = generate_synthetic(spec, 2);
  for (const auto& u : ds.users()) {
    const ParsedPrompt p = parse_prompt(build_prompt(u, catalog, ds.scenario()).text);
    CHECK(p.scenario == ds.scenario());
    REQUIRE(p.features.size() == u.items.size());
    for (std::size_t i = 0; i < u.items.size(); ++i) {
      CHECK(p.features[i].first == catalog.at(u.items[i]).title);
      CHECK(p.features[i].second == catalog.at(u.items[i]).category);
    }
  }
}

TEST_CASE("mock provider is deterministic, unit-norm and title-sensitive") {
  MockProvider a(64, 3), b(64, 3), other(64, 4);
  const ad::Vector x = a.embed("Alpha Quest; RPG");
  CHECK(x == b.embed("Alpha Quest; RPG"));
  CHECK(x.norm() == doctest::Approx(1.0));
  CHECK_FALSE(x == a.embed("Alpha Quest; RPH"));
  CHECK_FALSE(x == other.embed("Alpha Quest; RPG"));
  CHECK(a.embed("ab").norm() == doctest::Approx(1.0));
  CHECK_THROWS_AS(MockProvider(0), ConfigError);
  ProviderConfig pc;
  pc.kind = "mock";
  pc.dimension = 32;
  CHECK(make_provider(pc)->dimension() == 32);
  pc.kind = "oracle";
  CHECK_THROWS_AS(make_provider(pc), ConfigError);
}

TEST_CASE("cache round-trip is bit-exact and detects collisions") {
  const fs::path dir = scratch_dir("cache");
  EmbeddingCache cache(dir);
  CHECK(EmbeddingCache::digest("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK_FALSE(cache.get("hello"));
  ad::Vector v(3);
  v << 0.1, -1.0 / 3.0, 1e-300;
  cache.put("hello", v);
  const auto back = cache.get("hello");
  REQUIRE(back);
  CHECK(std::memcmp(back->data(), v.data(), sizeof(double) * 3) == 0);

  // Same digest file holding a different text is a collision.
  fs::copy_file(cache.path_for("hello"), cache.path_for("world"));
  CHECK_THROWS_AS(cache.get("world"), ProviderError);
  std::ofstream(cache.path_for("junk")) << "garbage";
  CHECK_THROWS_AS(cache.get("junk"), ProviderError);
}

TEST_CASE("remote provider fetches once and replays from cache") {
  FakeServer server(16);
  const fs::path dir = scratch_dir("remote");
  setenv("LOREC_TEST_TOKEN", "sekrit", 1);
  RemoteProvider provider(remote_settings(server.url("/ok"), dir));
  const ad::Vector a = provider.embed("some prompt");
  CHECK(a.size() == 16);
  CHECK(server.last_auth() == "Bearer sekrit");
  const ad::Vector b = provider.embed("some prompt");
  CHECK(a == b);
  CHECK(server.calls() == 1);
  CHECK(provider.network_calls() == 1);

  // A fresh provider over the same cache never touches the network.
  RemoteProvider replay(remote_settings(server.url("/ok"), dir));
  CHECK(replay.embed("some prompt") == a);
  CHECK(server.calls() == 1);
  unsetenv("LOREC_TEST_TOKEN");
}

TEST_CASE("concurrent embeds fetch each prompt at most once") {
  FakeServer server(16);
  RemoteProvider provider(remote_settings(server.url("/ok"), scratch_dir("concurrent")));
  std::vector<std::thread> threads;
  std::vector<ad::Vector> out(8);
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] { out[static_cast<std::size_t>(i)] = provider.embed(i % 2 ? "odd" : "even"); });
  }
  for (auto& t : threads) t.join();
  CHECK(server.calls() == 2);
  for (int i = 2; i < 8; ++i) CHECK(out[static_cast<std::size_t>(i)] == out[static_cast<std::size_t>(i % 2)]);
}

TEST_CASE("remote provider response forms and failures") {
  FakeServer server(16);
  RemoteProvider wrapped(remote_settings(server.url("/wrapped"), scratch_dir("wrapped")));
  CHECK(wrapped.embed("x y z").size() == 16);

  server.reset();
  RemoteProvider flaky(remote_settings(server.url("/flaky"), scratch_dir("flaky")));
  CHECK(flaky.embed("x y z").size() == 16);
  CHECK(flaky.network_calls() == 3);

  server.reset();
  RemoteProvider denied(remote_settings(server.url("/denied"), scratch_dir("denied")));
  CHECK_THROWS_AS(denied.embed("x"), ProviderError);
  CHECK(server.calls() == 1);

  RemoteProvider bad(remote_settings(server.url("/bad"), scratch_dir("bad")));
  CHECK_THROWS_AS(bad.embed("x"), ProviderError);

  RemoteProvider wrong_dim(remote_settings(server.url("/ok"), scratch_dir("dim"), 8));
  CHECK_THROWS_AS(wrong_dim.embed("x"), ProviderError);

  RemoteSettings none = remote_settings("", scratch_dir("none"));
  CHECK_THROWS_AS(RemoteProvider(none).embed("x"), ProviderError);

  RemoteSettings dead = remote_settings("http://127.0.0.1:1/embed", scratch_dir("dead"));
  dead.max_retries = 0;
  dead.timeout_s = 0.5;
  CHECK_THROWS_AS(RemoteProvider(dead).embed("x"), ProviderError);
}

TEST_CASE("embed_users aligns rows with users") {
  SyntheticSpec spec;
  spec.n_users = 10;
  spec.n_items = 60;
  spec.n_themes = 3;
  auto [catalog, ds] = generate_synthetic(spec, 1);
  MockProvider provider(32, 0);
  const ad::Matrix m = embed_users(provider, ds.users(), catalog, ds.scenario());
  REQUIRE(m.rows() == 10);
  const ad::Vector row3 = provider.embed(build_prompt(ds.at(3), catalog, ds.scenario()).text);
  CHECK((m.row(3).transpose() - row3).norm() == 0.0);
}

TEST_CASE("DT block maps provider width to the calibrator width") {
  std::mt19937_64 rng(1);
  const DTParams dt = DTParams::create(32, 16, 12, rng);
  CHECK(dt.in_dim() == 32);
  CHECK(dt.out_dim() == 12);
  const ad::Vector out = dt_transform(dt, ad::Vector::Ones(32));
  CHECK(out.size() == 12);
  CHECK(out.allFinite());
  CHECK_THROWS(dt_transform(dt, ad::Vector::Ones(31)));
}

TEST_CASE("prompts with target items are linearly separable from genuine prompts") {
  SyntheticSpec spec;
  auto [catalog, ds] = generate_synthetic(spec, 7);
  const auto counts = ds.item_counts(catalog.size());
  std::vector<ItemIndex> targets;
  for (std::size_t i = 0; i < catalog.size() && targets.size() < 5; ++i) {
    if (counts[i] == 0) targets.push_back(static_cast<ItemIndex>(i));
  }
  MockProvider provider(256, 0);
  for (auto kind : {AttackKind::kRandom, AttackKind::kBandwagon}) {
    AttackConfig cfg;
    cfg.kind = kind;
    cfg.budget_fraction = 0.02;
    cfg.targets = targets;
    cfg.seed = 3;
    const auto profiles = generate_attack(ds, catalog, cfg, nullptr);
    std::vector<ad::Vector> pos, neg;
    for (const auto& p : profiles) {
      pos.push_back(provider.embed(build_prompt_text(p.items, catalog, ds.scenario())));
    }
    for (const auto& u : ds.users()) {
      neg.push_back(provider.embed(build_prompt(u, catalog, ds.scenario()).text));
    }
    // One pass over the even-indexed half builds a class-mean probe; the odd half scores it.
    ad::Vector mp = ad::Vector::Zero(256), mn = ad::Vector::Zero(256);
    double np = 0, nn = 0;
    for (std::size_t i = 0; i < pos.size(); i += 2, ++np) mp += pos[i];
    for (std::size_t i = 0; i < neg.size(); i += 2, ++nn) mn += neg[i];
    mp /= np;
    mn /= nn;
    const ad::Vector w = mp - mn;
    const double b = -0.5 * w.dot(mp + mn);
    double tp = 0, tn = 0, cp = 0, cn = 0;
    for (std::size_t i = 1; i < pos.size(); i += 2, ++cp) tp += w.dot(pos[i]) + b > 0;
    for (std::size_t i = 1; i < neg.size(); i += 2, ++cn) tn += w.dot(neg[i]) + b <= 0;
    const double balanced = 0.5 * (tp / cp + tn / cn);
    MESSAGE("balanced probe accuracy " << balanced);
    CHECK(balanced >= 0.9);
  }
}
