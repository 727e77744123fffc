#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lorec/autodiff.hpp"
#include "lorec/data.hpp"
#include "lorec/llm_bridge.hpp"

namespace lorec {

class RecommenderState;

inline constexpr double kProbEpsilon = 1e-7;

struct CalibratorConfig {
  int d = 64;         // recommender dimension; feedback vectors are 2d wide
  int provider_dim = 256;
  int max_len = 50;   // longest feedback sequence
  int hidden = 64;    // width of h, d_head and the DT hidden layer
};

struct CalibratorParams {
  CalibratorConfig config;
  ad::Param k0;         // 1 x 2d summary token
  ad::Param positions;  // (max_len + 1) x 2d
  ad::Param wq, bq, wk, bk, wv, bv;
  ad::Param ln_gain, ln_bias;
  ad::Param h_w1, h_b1, h_w2, h_b2;  // 2d -> hidden -> 1
  DTParams dt;                       // D -> hidden -> 2d
  ad::Param d_w1, d_b1, d_w2, d_b2;  // D -> hidden -> 1

  static CalibratorParams create(const CalibratorConfig& config, std::uint64_t seed);

  void for_each_param(const std::function<void(const std::string&, ad::Param&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const ad::Param&)>& fn) const;
  std::vector<ad::Param*> lct_parameters();      // everything but d_head
  std::vector<ad::Param*> llm4dec_parameters();  // d_head only
  bool all_finite() const;

  void save(const std::filesystem::path& path) const;
  static CalibratorParams load(const std::filesystem::path& path);
  friend bool operator==(const CalibratorParams& a, const CalibratorParams& b);
};

// k_i = [e_i, e'_i]; both inputs L x d.
ad::Matrix compose_feedback(const ad::Matrix& items, const ad::Matrix& predictions);
ad::Var compose_feedback(ad::Var items, ad::Var predictions);

// Feedback of one sequence under a frozen recommender (last max_len items).
ad::Matrix recommender_feedback(const RecommenderState& state, std::span<const ItemIndex> sequence);

// Attention output at the summary-token position (1 x 2d).
ad::Var summarize(ad::Tape& tape, const CalibratorParams& params, ad::Var feedback, bool trainable);
ad::RowVector summarize(const CalibratorParams& params, const ad::Matrix& feedback);

// Clamped fraud probability from a summary (1 x 1).
ad::Var project(ad::Tape& tape, const CalibratorParams& params, ad::Var summary, bool trainable);
double project(const CalibratorParams& params, const ad::RowVector& summary);

// Clamped fraud probability from a provider embedding, no recommender feedback.
ad::Var llm4dec_head(ad::Tape& tape, const CalibratorParams& params, ad::Var embedding,
                     bool trainable);
double llm4dec_score(const CalibratorParams& params, const ad::Vector& embedding);
double llm4dec_score(const CalibratorParams& params, EmbeddingProvider& provider,
                     std::span<const ItemIndex> sequence, const ItemCatalog& catalog,
                     std::string_view scenario, std::size_t max_items = 50);

enum class EntropyForm { kIntent, kLiteral };
EntropyForm parse_entropy_form(std::string_view text);
std::string_view to_string(EntropyForm form);

using FraudScores = std::map<std::string, double>;

// Value forms.
double loss_fraud(std::span<const double> atk_scores, std::span<const double> train_scores);
double loss_fraud(const FraudScores& scores, std::span<const std::string> atk_ids,
                  std::span<const std::string> train_ids);
double loss_entropy_reg(std::span<const double> train_scores, EntropyForm form = EntropyForm::kIntent);
double loss_alignment(const ad::Matrix& l, const ad::Matrix& r);  // rows are users
double lct_total_loss(double fraud, double entropy, double alignment, double lambda1, double lambda2);
double llm4dec_total_loss(double fraud, double entropy, double lambda);

// Tape forms over stacked n x 1 score columns and n x 2d representations.
ad::Var loss_fraud(ad::Var atk_scores, ad::Var train_scores);
ad::Var loss_entropy_reg(ad::Var train_scores, EntropyForm form = EntropyForm::kIntent);
ad::Var loss_alignment(ad::Var l, ad::Var r);
ad::Var lct_total_loss(ad::Var fraud, ad::Var entropy, ad::Var alignment, double lambda1,
                       double lambda2);
ad::Var llm4dec_total_loss(ad::Var fraud, ad::Var entropy, double lambda);

// Per-user calibrator inputs. Feedback is empty in LLM4Dec mode.
struct CalibratorSample {
  ad::Matrix feedback;   // L x 2d
  ad::Vector embedding;  // D
};

struct CalibratorTrainOptions {
  double lr = 1e-3;
  int batch_size = 64;
  double lambda1 = 0.1;  // entropy weight (LCT) or lambda (LLM4Dec)
  double lambda2 = 1.0;  // alignment weight (LCT)
  EntropyForm entropy_form = EntropyForm::kIntent;
};

struct CalibratorEpochStats {
  double loss = 0.0;
  double fraud = 0.0;
  double entropy = 0.0;
  double alignment = 0.0;
  std::size_t batches = 0;
};

enum class CalibratorMode { kLct, kLlm4Dec };

// Mini-batch Adam on L_LCT or L_LLM4Dec. Each batch holds a proportional share
// of supervised fraudsters and training users.
class CalibratorTrainer {
 public:
  CalibratorTrainer(CalibratorParams& params, CalibratorMode mode, CalibratorTrainOptions options,
                    std::uint64_t seed);

  CalibratorEpochStats train_epoch(std::span<const CalibratorSample> atk,
                                   std::span<const CalibratorSample> train);

 private:
  CalibratorParams& params_;
  CalibratorMode mode_;
  CalibratorTrainOptions options_;
  ad::Adam adam_;
  std::mt19937_64 rng_;
  long epoch_ = 0;
};

struct ScoredUsers {
  std::vector<double> p;
  ad::Matrix summaries;  // n x 2d, LCT mode only
};

ScoredUsers score_users(const CalibratorParams& params, CalibratorMode mode,
                        std::span<const CalibratorSample> samples);

// Mean per-coordinate variance of the summaries; near zero means collapse.
double summary_spread(const ad::Matrix& summaries);

}  // namespace lorec
