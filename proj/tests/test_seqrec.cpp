#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "lorec/errors.hpp"
#include "lorec/llm_bridge.hpp"
#include "lorec/seqrec.hpp"
#include "support.hpp"

using namespace lorec;
using lorec::testing::gradient_check;

namespace {

RecommenderConfig small_config(BackboneKind kind, int dim = 8) {
  RecommenderConfig c;
  c.backbone = kind;
  c.dim = dim;
  c.max_len = 12;
  c.blocks = 2;
  return c;
}

// Weighted next-item loss written out directly from value-form embeddings.
double eq19_oracle(const RecommenderState& state, std::span<const ItemIndex> seq, double w) {
  const ad::Matrix items = state.item_embeddings();
  const ad::Matrix pred = state.forward(seq.first(seq.size() - 1));
  double total = 0;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    const std::set<ItemIndex> prefix(seq.begin(), seq.begin() + static_cast<long>(i) + 2);
    const auto p = pred.row(static_cast<Eigen::Index>(i));
    total += std::log(ad::sigmoid(items.row(seq[i + 1]).dot(p)));
    for (Eigen::Index j = 0; j < items.rows(); ++j) {
      if (prefix.count(static_cast<ItemIndex>(j))) continue;
      total += std::log(1 - ad::sigmoid(items.row(j).dot(p)));
    }
  }
  return -w * total;
}

}  // namespace

TEST_CASE("forward output is causal for both backbones") {
  for (auto kind : {BackboneKind::kSelfAttention, BackboneKind::kRecurrent}) {
    const auto state = RecommenderState::create(small_config(kind), 30, 4);
    const std::vector<ItemIndex> a{3, 7, 1, 9, 12, 4}, b{3, 7, 1, 20, 2, 28};
    const ad::Matrix fa = state.forward(a), fb = state.forward(b);
    REQUIRE(fa.rows() == 6);
    CHECK(fa.cols() == 8);
    CHECK((fa.topRows(3) - fb.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((fa.row(3) - fb.row(3)).norm() > 0.0);
    // A prefix alone produces the same rows as inside a longer sequence.
    const ad::Matrix fp = state.forward(std::span<const ItemIndex>(a).first(4));
    CHECK((fp - fa.topRows(4)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("parameter init is bounded by 1/sqrt(d)") {
  const auto state = RecommenderState::create(small_config(BackboneKind::kSelfAttention, 16), 30, 1);
  const ad::Matrix e = state.item_embeddings();
  CHECK(e.cwiseAbs().maxCoeff() <= 0.25);
  CHECK(state.all_finite());
}

TEST_CASE("text encoder is a deterministic function of provider vectors") {
  const ItemCatalog catalog({{"a", "Alpha Quest", "RPG", 0}, {"b", "Beta Race", "Racing", 0},
                             {"c", "Gamma Quest", "RPG", 0}});
  MockProvider provider(32, 0);
  const ad::Matrix feats = item_text_features(catalog, provider);
  REQUIRE(feats.rows() == 3);
  CHECK(feats.cols() == 32);
  RecommenderConfig c = small_config(BackboneKind::kSelfAttention);
  c.encoder = EncoderMode::kText;
  const auto s1 = RecommenderState::create(c, 3, 2, feats);
  const auto s2 = RecommenderState::create(c, 3, 2, feats);
  CHECK(s1.item_embeddings() == s2.item_embeddings());
  CHECK_THROWS(RecommenderState::create(c, 3, 2));
}

TEST_CASE("weighted next-item loss value and gradient match the direct oracle") {
  for (auto kind : {BackboneKind::kSelfAttention, BackboneKind::kRecurrent}) {
    for (int point = 0; point < 5; ++point) {
      auto state = RecommenderState::create(small_config(kind, 6), 15, 100 + point);
      const std::vector<ItemIndex> seq{2, 9, 4, 11, 0, 7};
      const double w = 0.3 + 0.2 * point;
      ad::Tape tape;
      ad::Var items = state.item_table(tape, false);
      const double tape_value = user_loss(tape, state, items, seq, w, true, nullptr, false).scalar();
      CHECK(tape_value == doctest::Approx(eq19_oracle(state, seq, w)).epsilon(1e-12));

      auto params = state.parameters();
      auto value = [&] { return eq19_oracle(state, seq, w); };
      auto analytic = [&] {
        ad::Tape t;
        ad::Var it = state.item_table(t, true);
        t.backward(user_loss(t, state, it, seq, w, true, nullptr, true));
      };
      CHECK(gradient_check(params, value, analytic).max_rel < 1e-4);
    }
  }
}

TEST_CASE("doubling every weight doubles the loss and its gradient") {
  std::mt19937_64 rng(8);
  const InteractionDataset ds = testing::random_dataset(6, 20, 4, 9, rng);
  const DataSplit split = split_leave_one_out(ds, 12);
  auto state = RecommenderState::create(small_config(BackboneKind::kSelfAttention), 20, 3);
  std::vector<double> w{0.2, 1.0, 0.7, 0.0, 1.3, 0.5}, w2;
  for (double x : w) w2.push_back(2 * x);
  CHECK(weighted_loss(state, split, w2, true) == 2 * weighted_loss(state, split, w, true));

  auto grads = [&](const std::vector<double>& weights) {
    for (auto* p : state.parameters()) p->zero_grad();
    for (std::size_t u = 0; u < split.users.size(); ++u) {
      ad::Tape t;
      ad::Var it = state.item_table(t, true);
      t.backward(user_loss(t, state, it, split.users[u].train, weights[u], true, nullptr, true));
    }
    std::vector<ad::Matrix> out;
    for (auto* p : state.parameters()) out.push_back(p->grad);
    return out;
  };
  const auto g1 = grads(w), g2 = grads(w2);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2 * g1[i]);
}

TEST_CASE("ranking order and tie-breaking") {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1, 0.9};
  const std::vector<char> none(5, 0);
  const std::vector<int> lex{4, 3, 2, 1, 0};
  CHECK(rank_items(s, none, 5, lex) == std::vector<ItemIndex>{4, 1, 2, 0, 3});
  std::vector<char> ex(5, 0);
  ex[4] = 1;
  CHECK(rank_items(s, ex, 2, lex) == std::vector<ItemIndex>{1, 2});
  CHECK(rank_of(s, ex, 0, lex) == 3);
  CHECK_FALSE(rank_of(s, ex, 4, lex));
}

TEST_CASE("HR and NDCG closed forms") {
  // Single user whose test item ranks third.
  const ItemCatalog catalog({{"a", "A", "", 0}, {"b", "B", "", 0}, {"c", "C", "", 0},
                             {"d", "D", "", 0}, {"e", "E", "", 0}, {"f", "F", "", 0}});
  const std::vector<double> s{0.9, 0.8, 0.7, 0.1, 0.6, 0.2};
  const std::vector<char> ex{0, 0, 0, 1, 0, 0};
  REQUIRE(rank_of(s, ex, 4, catalog.lex_ranks()) == 4);
  REQUIRE(rank_of(s, ex, 2, catalog.lex_ranks()) == 3);
  CHECK(1 / std::log2(3.0 + 1) == doctest::Approx(0.5));
}

TEST_CASE("evaluate_topk equals brute-force re-ranking") {
  for (int inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(inst);
    const int n_items = 10 + inst * 2;
    const ItemCatalog catalog = testing::shuffled_catalog(n_items, rng);
    const InteractionDataset ds = testing::random_dataset(1 + inst % 20, n_items, 3, 8, rng, inst % 3 == 0);
    const DataSplit split = split_leave_one_out(ds, 12);
    const auto state = RecommenderState::create(
        small_config(inst % 2 ? BackboneKind::kRecurrent : BackboneKind::kSelfAttention), n_items, inst);
    std::vector<std::string> ids;
    for (const auto& r : catalog.items()) ids.push_back(r.item_id);
    std::vector<testing::OracleUser> users;
    for (const auto& u : split.users) {
      testing::OracleUser o;
      const auto hist = evaluation_history(u, 12);
      o.scores = testing::to_std(state.next_scores(hist));
      o.excluded = {hist.begin(), hist.end()};
      o.test = u.test;
      users.push_back(o);
    }
    for (std::size_t k : {1, 3, 10}) {
      const auto m = evaluate_topk(state, split, k, true, catalog.lex_ranks());
      const auto o = testing::brute_metrics(users, {}, ids, k, k);
      CHECK(std::abs(m.hr - o.hr) <= 1e-12);
      CHECK(std::abs(m.ndcg - o.ndcg) <= 1e-12);
    }
  }
}

TEST_CASE("training lowers the loss and is deterministic") {
  std::mt19937_64 rng(2);
  const InteractionDataset ds = testing::random_dataset(30, 25, 5, 10, rng);
  const DataSplit split = split_leave_one_out(ds, 12);
  for (auto kind : {BackboneKind::kSelfAttention, BackboneKind::kRecurrent}) {
    const auto init = RecommenderState::create(small_config(kind), 25, 5);
    TrainOptions opt;
    opt.epochs = 8;
    opt.lr = 1e-2;
    opt.batch_size = 8;
    opt.negatives = NegativePolicy::kExact;
    const auto a = train_weighted(init, split, {}, opt, 9);
    const auto b = train_weighted(init, split, {}, opt, 9);
    CHECK(a == b);
    CHECK(a.epochs_trained() == 8);
    CHECK(weighted_loss(a, split, {}, true) < weighted_loss(init, split, {}, true));
    opt.negatives = NegativePolicy::kSampled;
    const auto c = train_weighted(init, split, {}, opt, 9);
    CHECK(c.all_finite());
    CHECK(c == train_weighted(init, split, {}, opt, 9));
    CHECK_FALSE(c == a);
  }
}

TEST_CASE("zero weight removes a user's influence") {
  std::mt19937_64 rng(4);
  const InteractionDataset ds = testing::random_dataset(5, 20, 5, 8, rng);
  const DataSplit split = split_leave_one_out(ds, 12);
  DataSplit without = split;
  without.users.erase(without.users.begin() + 2);
  const auto init = RecommenderState::create(small_config(BackboneKind::kRecurrent), 20, 5);
  TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 64;
  opt.negatives = NegativePolicy::kExact;
  const auto a = train_weighted(init, split, std::vector<double>{1, 1, 0, 1, 1}, opt, 1);
  const auto b = train_weighted(init, without, {}, opt, 1);
  CHECK((a.item_embeddings() - b.item_embeddings()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("checkpoint round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "lorec_test_seqrec";
  std::filesystem::create_directories(dir);
  for (auto kind : {BackboneKind::kSelfAttention, BackboneKind::kRecurrent}) {
    auto state = RecommenderState::create(small_config(kind), 17, 6);
    state.add_trained_epochs(3);
    state.save(dir / "s.ckpt");
    CHECK(RecommenderState::load(dir / "s.ckpt") == state);
  }
  CHECK_THROWS(RecommenderState::load(dir / "absent.ckpt"));
}

TEST_CASE("recommend_topk skips history") {
  const ItemCatalog catalog({{"a", "A", "", 0}, {"b", "B", "", 0}, {"c", "C", "", 0},
                             {"d", "D", "", 0}});
  const auto state = RecommenderState::create(small_config(BackboneKind::kSelfAttention), 4, 1);
  const std::vector<ItemIndex> hist{0, 2};
  const auto top = recommend_topk(state, catalog, hist, 4, true);
  CHECK(top.size() == 2);
  for (ItemIndex v : top) CHECK((v == 1 || v == 3));
  CHECK(recommend_topk(state, catalog, hist, 4, false).size() == 4);
}
