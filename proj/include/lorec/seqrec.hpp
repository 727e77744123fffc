#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lorec/autodiff.hpp"
#include "lorec/data.hpp"

namespace lorec {

class EmbeddingProvider;

enum class EncoderMode { kId, kText };
enum class BackboneKind { kSelfAttention, kRecurrent };

std::string_view to_string(EncoderMode mode);
std::string_view to_string(BackboneKind kind);
EncoderMode parse_encoder_mode(std::string_view text);
BackboneKind parse_backbone_kind(std::string_view text);

struct RecommenderConfig {
  BackboneKind backbone = BackboneKind::kSelfAttention;
  EncoderMode encoder = EncoderMode::kId;
  int dim = 64;
  int max_len = 50;
  int blocks = 2;  // self-attention only
};

// Provider vectors for "title; category" of every catalog item (|V| x D).
ad::Matrix item_text_features(const ItemCatalog& catalog, EmbeddingProvider& provider);

struct AttentionBlockParams {
  ad::Param ln1_gain, ln1_bias;
  ad::Param wq, bq, wk, bk, wv, bv;
  ad::Param ln2_gain, ln2_bias;
  ad::Param w1, b1, w2, b2;
};

// Item encoder plus sequential backbone. Parameters are plain values, so the
// state copies like any other value type.
class RecommenderState {
 public:
  // `text_features` is required in text mode and ignored in id mode.
  static RecommenderState create(const RecommenderConfig& config, int n_items,
                                 std::uint64_t seed,
                                 std::optional<ad::Matrix> text_features = std::nullopt);

  const RecommenderConfig& config() const { return config_; }
  int n_items() const { return n_items_; }
  int dim() const { return config_.dim; }
  long epochs_trained() const { return epochs_trained_; }
  void add_trained_epochs(long n) { epochs_trained_ += n; }

  // Visits every trainable parameter with a stable, unique name.
  void for_each_param(const std::function<void(const std::string&, ad::Param&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const ad::Param&)>& fn) const;
  std::vector<ad::Param*> parameters();
  bool all_finite() const;

  // Graph-building forms. `trainable` binds parameters as gradient leaves.
  ad::Var item_table(ad::Tape& tape, bool trainable) const;
  ad::Var forward(ad::Tape& tape, ad::Var items, std::span<const ItemIndex> sequence,
                  bool trainable) const;

  // Value forms.
  ad::Matrix item_embeddings() const;                              // |V| x d
  ad::Matrix forward(std::span<const ItemIndex> sequence) const;  // L x d
  ad::Vector next_scores(std::span<const ItemIndex> history) const;

  const std::optional<ad::Matrix>& text_features() const { return text_features_; }

  void save(const std::filesystem::path& path) const;
  static RecommenderState load(const std::filesystem::path& path);

  friend bool operator==(const RecommenderState& a, const RecommenderState& b);

 private:
  RecommenderConfig config_;
  int n_items_ = 0;
  long epochs_trained_ = 0;
  std::optional<ad::Matrix> text_features_;

  // encoder
  ad::Param item_table_;  // id mode
  ad::Param proj_w_, proj_b_;  // text mode

  // self-attention backbone
  ad::Param positions_;
  std::vector<AttentionBlockParams> blocks_;
  ad::Param final_gain_, final_bias_;

  // recurrent backbone
  ad::Param gru_wz_, gru_uz_, gru_bz_;  // update gate
  ad::Param gru_wr_, gru_ur_, gru_br_;  // reset gate
  ad::Param gru_wh_, gru_uh_, gru_bh_;  // candidate state

  ad::Var self_attention(ad::Tape& tape, ad::Var x, bool trainable) const;
  ad::Var recurrent(ad::Tape& tape, ad::Var x, bool trainable) const;
};

// sigmoid(e_item . e_pred)
double score(std::span<const double> e_item, std::span<const double> e_pred);

// Sorted candidate list: descending score, ties by ascending item_id.
std::vector<ItemIndex> rank_items(std::span<const double> scores, std::span<const char> excluded,
                                  std::size_t k, std::span<const int> lex_rank);

// 1-based rank of `item` among non-excluded candidates under the same order;
// nullopt when the item itself is excluded.
std::optional<std::size_t> rank_of(std::span<const double> scores, std::span<const char> excluded,
                                   ItemIndex item, std::span<const int> lex_rank);

std::vector<ItemIndex> recommend_topk(const RecommenderState& state, const ItemCatalog& catalog,
                                      std::span<const ItemIndex> history, std::size_t k,
                                      bool exclude_history);

enum class NegativePolicy { kAuto, kExact, kSampled };
NegativePolicy parse_negative_policy(std::string_view text);
std::string_view to_string(NegativePolicy policy);

struct TrainOptions {
  int epochs = 1;
  double lr = 1e-3;
  int batch_size = 64;
  NegativePolicy negatives = NegativePolicy::kAuto;
  int exact_bound = 4096;  // exact negative sums up to this catalog size
};

// Weighted next-item loss of one user's training sequence on a tape.
ad::Var user_loss(ad::Tape& tape, const RecommenderState& state, ad::Var items,
                  std::span<const ItemIndex> sequence, double weight, bool exact,
                  std::mt19937_64* rng, bool trainable);

// Total weighted loss over a split (value only); weights aligned with
// split.users.
double weighted_loss(const RecommenderState& state, const DataSplit& split,
                     std::span<const double> weights, bool exact);

// Mini-batch Adam on the user-weighted next-item loss. Keeps optimizer state
// across calls so alternating schedules continue the same trajectory.
class RecommenderTrainer {
 public:
  RecommenderTrainer(RecommenderState& state, TrainOptions options, std::uint64_t seed);

  // `weights` aligned with split.users; empty means unweighted.
  double train_epoch(const DataSplit& split, std::span<const double> weights);
  bool exact_negatives() const { return exact_; }

 private:
  RecommenderState& state_;
  TrainOptions options_;
  ad::Adam adam_;
  std::mt19937_64 rng_;
  bool exact_;
  long epoch_ = 0;
};

RecommenderState train_weighted(RecommenderState state, const DataSplit& split,
                                std::span<const double> weights, const TrainOptions& options,
                                std::uint64_t seed);

struct TopkMetrics {
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t users = 0;
};

// HR@k / NDCG@k on the test item with train+valid as history; only users with
// label genuine when `genuine_only`. Empty `lex_rank` breaks ties by index.
TopkMetrics evaluate_topk(const RecommenderState& state, const DataSplit& split, std::size_t k = 10,
                          bool genuine_only = true, std::span<const int> lex_rank = {});

// Model input for next-item prediction after train + valid.
std::vector<ItemIndex> evaluation_history(const UserSplit& user, int max_len);

}  // namespace lorec
