#include "lorec/lct.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "lorec/errors.hpp"
#include "lorec/seqrec.hpp"

namespace lorec {

namespace {

constexpr char kCalibratorMagic[8] = {'L', 'O', 'R', 'E', 'C', 'C', 'T', '\0'};
constexpr std::uint32_t kCalibratorVersion = 1;

ad::Param uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return ad::Param(std::move(m));
}

ad::Param filled(Eigen::Index rows, Eigen::Index cols, double v) {
  return ad::Param(ad::Matrix::Constant(rows, cols, v));
}

double fan_in_bound(Eigen::Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("calibrator checkpoint truncated");
  return v;
}

void check_lambda(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw ConfigError(std::string(name) + " must be a finite non-negative number");
  }
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

}  // namespace

// --- parameters ----------------------------------------------------------------------

CalibratorParams CalibratorParams::create(const CalibratorConfig& config, std::uint64_t seed) {
  if (config.d < 1 || config.provider_dim < 1 || config.max_len < 1 || config.hidden < 1) {
    throw ConfigError("calibrator: dimensions must be positive");
  }
  const Eigen::Index w = 2 * config.d;
  const Eigen::Index hid = config.hidden;
  std::mt19937_64 rng(seed);
  CalibratorParams p;
  p.config = config;
  const double bw = fan_in_bound(w);
  p.k0 = uniform(1, w, bw, rng);
  p.positions = uniform(config.max_len + 1, w, bw, rng);
  p.wq = uniform(w, w, bw, rng);
  p.bq = filled(1, w, 0.0);
  p.wk = uniform(w, w, bw, rng);
  p.bk = filled(1, w, 0.0);
  p.wv = uniform(w, w, bw, rng);
  p.bv = filled(1, w, 0.0);
  p.ln_gain = filled(1, w, 1.0);
  p.ln_bias = filled(1, w, 0.0);
  p.h_w1 = uniform(w, hid, bw, rng);
  p.h_b1 = filled(1, hid, 0.0);
  p.h_w2 = uniform(hid, 1, fan_in_bound(hid), rng);
  p.h_b2 = filled(1, 1, 0.0);
  p.dt = DTParams::create(config.provider_dim, config.hidden, static_cast<int>(w), rng);
  p.d_w1 = uniform(config.provider_dim, hid, fan_in_bound(config.provider_dim), rng);
  p.d_b1 = filled(1, hid, 0.0);
  p.d_w2 = uniform(hid, 1, fan_in_bound(hid), rng);
  p.d_b2 = filled(1, 1, 0.0);
  return p;
}

void CalibratorParams::for_each_param(
    const std::function<void(const std::string&, ad::Param&)>& fn) {
  fn("k0", k0);
  fn("positions", positions);
  fn("wq", wq);
  fn("bq", bq);
  fn("wk", wk);
  fn("bk", bk);
  fn("wv", wv);
  fn("bv", bv);
  fn("ln_gain", ln_gain);
  fn("ln_bias", ln_bias);
  fn("h.w1", h_w1);
  fn("h.b1", h_b1);
  fn("h.w2", h_w2);
  fn("h.b2", h_b2);
  fn("dt.w1", dt.w1);
  fn("dt.b1", dt.b1);
  fn("dt.w2", dt.w2);
  fn("dt.b2", dt.b2);
  fn("d.w1", d_w1);
  fn("d.b1", d_b1);
  fn("d.w2", d_w2);
  fn("d.b2", d_b2);
}

void CalibratorParams::for_each_param(
    const std::function<void(const std::string&, const ad::Param&)>& fn) const {
  const_cast<CalibratorParams*>(this)->for_each_param(
      [&fn](const std::string& name, ad::Param& p) { fn(name, p); });
}

std::vector<ad::Param*> CalibratorParams::lct_parameters() {
  std::vector<ad::Param*> out;
  for_each_param([&out](const std::string& name, ad::Param& p) {
    if (name.rfind("d.", 0) != 0) out.push_back(&p);
  });
  return out;
}

std::vector<ad::Param*> CalibratorParams::llm4dec_parameters() {
  return {&d_w1, &d_b1, &d_w2, &d_b2};
}

bool CalibratorParams::all_finite() const {
  bool ok = true;
  for_each_param([&ok](const std::string&, const ad::Param& p) { ok = ok && p.all_finite(); });
  return ok;
}

void CalibratorParams::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write calibrator checkpoint '" + path.string() + "'");
  out.write(kCalibratorMagic, sizeof(kCalibratorMagic));
  write_pod<std::uint32_t>(out, kCalibratorVersion);
  write_pod<std::int32_t>(out, config.d);
  write_pod<std::int32_t>(out, config.provider_dim);
  write_pod<std::int32_t>(out, config.max_len);
  write_pod<std::int32_t>(out, config.hidden);
  for_each_param([&out](const std::string&, const ad::Param& p) {
    write_pod<std::int64_t>(out, p.value.rows());
    write_pod<std::int64_t>(out, p.value.cols());
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
  });
  if (!out) throw DataError("failed writing calibrator checkpoint '" + path.string() + "'");
}

CalibratorParams CalibratorParams::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open calibrator checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCalibratorMagic, sizeof(magic)) != 0) {
    throw DataError("'" + path.string() + "' is not a calibrator checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCalibratorVersion) {
    throw DataError("unsupported calibrator checkpoint version " + std::to_string(version));
  }
  CalibratorConfig config;
  config.d = read_pod<std::int32_t>(in);
  config.provider_dim = read_pod<std::int32_t>(in);
  config.max_len = read_pod<std::int32_t>(in);
  config.hidden = read_pod<std::int32_t>(in);
  CalibratorParams p = create(config, 0);
  p.for_each_param([&in](const std::string& name, ad::Param& param) {
    const auto rows = read_pod<std::int64_t>(in);
    const auto cols = read_pod<std::int64_t>(in);
    if (rows != param.value.rows() || cols != param.value.cols()) {
      throw DataError("calibrator checkpoint parameter '" + name + "' has the wrong shape");
    }
    in.read(reinterpret_cast<char*>(param.value.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(rows * cols)));
    if (!in) throw DataError("calibrator checkpoint truncated");
    param.zero_grad();
  });
  return p;
}

bool operator==(const CalibratorParams& a, const CalibratorParams& b) {
  if (a.config.d != b.config.d || a.config.provider_dim != b.config.provider_dim ||
      a.config.max_len != b.config.max_len || a.config.hidden != b.config.hidden) {
    return false;
  }
  std::vector<const ad::Matrix*> pa, pb;
  a.for_each_param([&pa](const std::string&, const ad::Param& p) { pa.push_back(&p.value); });
  b.for_each_param([&pb](const std::string&, const ad::Param& p) { pb.push_back(&p.value); });
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->rows() != pb[i]->rows() || pa[i]->cols() != pb[i]->cols() ||
        std::memcmp(pa[i]->data(), pb[i]->data(), sizeof(double) * static_cast<std::size_t>(pa[i]->size())) != 0) {
      return false;
    }
  }
  return true;
}

// --- feedback, summary, projection -----------------------------------------------------

ad::Matrix compose_feedback(const ad::Matrix& items, const ad::Matrix& predictions) {
  if (items.rows() != predictions.rows() || items.cols() != predictions.cols()) {
    throw std::invalid_argument("compose_feedback: item and prediction embeddings differ in shape");
  }
  ad::Matrix k(items.rows(), items.cols() * 2);
  k << items, predictions;
  return k;
}

ad::Var compose_feedback(ad::Var items, ad::Var predictions) {
  if (items.rows() != predictions.rows() || items.cols() != predictions.cols()) {
    throw std::invalid_argument("compose_feedback: item and prediction embeddings differ in shape");
  }
  return ad::hcat(items, predictions);
}

ad::Matrix recommender_feedback(const RecommenderState& state, std::span<const ItemIndex> sequence) {
  if (sequence.empty()) throw DataError("feedback: empty sequence");
  const auto max_len = static_cast<std::size_t>(state.config().max_len);
  if (sequence.size() > max_len) sequence = sequence.subspan(sequence.size() - max_len);
  ad::Tape tape;
  ad::Var items = state.item_table(tape, false);
  ad::Var pred = state.forward(tape, items, sequence, false);
  ad::Var e = ad::gather_rows(items, sequence);
  return compose_feedback(e.value(), pred.value());
}

ad::Var summarize(ad::Tape& tape, const CalibratorParams& params, ad::Var feedback, bool trainable) {
  const Eigen::Index len = feedback.rows();
  const Eigen::Index width = params.k0.value.cols();
  if (len < 1) throw std::invalid_argument("summarize: empty feedback");
  if (feedback.cols() != width) throw std::invalid_argument("summarize: feedback width mismatch");
  if (len > params.config.max_len) throw std::invalid_argument("summarize: feedback too long");
  auto bind = [&](const ad::Param& p) { return tape.bind(p, trainable); };
  ad::Var x = ad::vcat(bind(params.k0), feedback);
  x = ad::add(x, ad::slice_rows(bind(params.positions), 0, len + 1));
  ad::Var x0 = ad::row(x, 0);
  ad::Var q = ad::affine(x0, bind(params.wq), bind(params.bq));
  ad::Var k = ad::affine(x, bind(params.wk), bind(params.bk));
  ad::Var v = ad::affine(x, bind(params.wv), bind(params.bv));
  const double inv = 1.0 / std::sqrt(static_cast<double>(width));
  ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv), /*causal=*/false);
  return ad::layer_norm(ad::add(x0, ad::matmul(att, v)), bind(params.ln_gain), bind(params.ln_bias));
}

ad::RowVector summarize(const CalibratorParams& params, const ad::Matrix& feedback) {
  ad::Tape tape;
  return summarize(tape, params, tape.constant_ref(feedback), false).value();
}

ad::Var project(ad::Tape& tape, const CalibratorParams& params, ad::Var summary, bool trainable) {
  auto bind = [&](const ad::Param& p) { return tape.bind(p, trainable); };
  ad::Var h = ad::tanh(ad::affine(summary, bind(params.h_w1), bind(params.h_b1)));
  ad::Var logit = ad::affine(h, bind(params.h_w2), bind(params.h_b2));
  return ad::clamp(ad::sigmoid(logit), kProbEpsilon, 1.0 - kProbEpsilon);
}

double project(const CalibratorParams& params, const ad::RowVector& summary) {
  ad::Tape tape;
  return project(tape, params, tape.constant(summary), false).scalar();
}

ad::Var llm4dec_head(ad::Tape& tape, const CalibratorParams& params, ad::Var embedding,
                     bool trainable) {
  if (embedding.cols() != params.config.provider_dim) {
    throw std::invalid_argument("llm4dec: embedding dimension mismatch");
  }
  auto bind = [&](const ad::Param& p) { return tape.bind(p, trainable); };
  ad::Var h = ad::tanh(ad::affine(embedding, bind(params.d_w1), bind(params.d_b1)));
  ad::Var logit = ad::affine(h, bind(params.d_w2), bind(params.d_b2));
  return ad::clamp(ad::sigmoid(logit), kProbEpsilon, 1.0 - kProbEpsilon);
}

double llm4dec_score(const CalibratorParams& params, const ad::Vector& embedding) {
  ad::Tape tape;
  return llm4dec_head(tape, params, tape.constant(embedding.transpose()), false).scalar();
}

double llm4dec_score(const CalibratorParams& params, EmbeddingProvider& provider,
                     std::span<const ItemIndex> sequence, const ItemCatalog& catalog,
                     std::string_view scenario, std::size_t max_items) {
  return llm4dec_score(params, provider.embed(build_prompt_text(sequence, catalog, scenario, max_items)));
}

// --- losses ------------------------------------------------------------------------------

EntropyForm parse_entropy_form(std::string_view text) {
  if (text == "intent") return EntropyForm::kIntent;
  if (text == "literal") return EntropyForm::kLiteral;
  throw ConfigError("unknown entropy regularizer form '" + std::string(text) + "'");
}

std::string_view to_string(EntropyForm form) {
  return form == EntropyForm::kIntent ? "intent" : "literal";
}

double loss_fraud(std::span<const double> atk_scores, std::span<const double> train_scores) {
  if (atk_scores.empty() || train_scores.empty()) {
    throw std::invalid_argument("loss_fraud: both user sets must be non-empty");
  }
  double a = 0.0, t = 0.0;
  for (double p : atk_scores) a += std::log(clamp_prob(p));
  for (double p : train_scores) t += std::log(1.0 - clamp_prob(p));
  return -a / static_cast<double>(atk_scores.size()) - t / static_cast<double>(train_scores.size());
}

double loss_fraud(const FraudScores& scores, std::span<const std::string> atk_ids,
                  std::span<const std::string> train_ids) {
  auto collect = [&scores](std::span<const std::string> ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
      auto it = scores.find(id);
      if (it == scores.end()) throw DataError("loss_fraud: no score for user '" + id + "'");
      out.push_back(it->second);
    }
    return out;
  };
  const std::set<std::string> atk(atk_ids.begin(), atk_ids.end());
  for (const std::string& id : train_ids) {
    if (atk.count(id)) throw DataError("loss_fraud: user '" + id + "' is in both sets");
  }
  return loss_fraud(collect(atk_ids), collect(train_ids));
}

double loss_entropy_reg(std::span<const double> train_scores, EntropyForm form) {
  if (train_scores.empty()) throw std::invalid_argument("loss_entropy_reg: no scores");
  double s = 0.0;
  for (double p : train_scores) {
    const double c = clamp_prob(p);
    s += std::log(c) + std::log(1.0 - c);
  }
  s /= static_cast<double>(train_scores.size());
  return form == EntropyForm::kIntent ? -s : s;
}

double loss_alignment(const ad::Matrix& l, const ad::Matrix& r) {
  if (l.rows() != r.rows() || l.cols() != r.cols() || l.rows() == 0) {
    throw std::invalid_argument("loss_alignment: representation sets differ");
  }
  double s = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    const double nl = l.row(i).norm(), nr = r.row(i).norm();
    if (nl == 0.0 || nr == 0.0) throw std::domain_error("loss_alignment: zero-norm representation");
    s += l.row(i).dot(r.row(i)) / (nl * nr);
  }
  return -s / static_cast<double>(l.rows());
}

double lct_total_loss(double fraud, double entropy, double alignment, double lambda1,
                      double lambda2) {
  check_lambda(lambda1, "lambda1");
  check_lambda(lambda2, "lambda2");
  return fraud + lambda1 * entropy + lambda2 * alignment;
}

double llm4dec_total_loss(double fraud, double entropy, double lambda) {
  check_lambda(lambda, "lambda");
  return fraud + lambda * entropy;
}

ad::Var loss_fraud(ad::Var atk_scores, ad::Var train_scores) {
  ad::Var a = ad::mean(ad::log(atk_scores));
  ad::Var t = ad::mean(ad::log(ad::one_minus(train_scores)));
  return ad::scale(ad::add(a, t), -1.0);
}

ad::Var loss_entropy_reg(ad::Var train_scores, EntropyForm form) {
  ad::Var s = ad::mean(ad::add(ad::log(train_scores), ad::log(ad::one_minus(train_scores))));
  return form == EntropyForm::kIntent ? ad::scale(s, -1.0) : s;
}

ad::Var loss_alignment(ad::Var l, ad::Var r) {
  if (l.rows() != r.rows() || l.cols() != r.cols() || l.rows() == 0) {
    throw std::invalid_argument("loss_alignment: representation sets differ");
  }
  std::vector<ad::Var> cos;
  cos.reserve(static_cast<std::size_t>(l.rows()));
  for (Eigen::Index i = 0; i < l.rows(); ++i) cos.push_back(ad::cosine(ad::row(l, i), ad::row(r, i)));
  return ad::scale(ad::mean(ad::stack_rows(cos)), -1.0);
}

ad::Var lct_total_loss(ad::Var fraud, ad::Var entropy, ad::Var alignment, double lambda1,
                       double lambda2) {
  check_lambda(lambda1, "lambda1");
  check_lambda(lambda2, "lambda2");
  return ad::add(fraud, ad::add(ad::scale(entropy, lambda1), ad::scale(alignment, lambda2)));
}

ad::Var llm4dec_total_loss(ad::Var fraud, ad::Var entropy, double lambda) {
  check_lambda(lambda, "lambda");
  return ad::add(fraud, ad::scale(entropy, lambda));
}

// --- training and scoring ---------------------------------------------------------------

CalibratorTrainer::CalibratorTrainer(CalibratorParams& params, CalibratorMode mode,
                                     CalibratorTrainOptions options, std::uint64_t seed)
    : params_(params),
      mode_(mode),
      options_(options),
      adam_(mode == CalibratorMode::kLct ? params.lct_parameters() : params.llm4dec_parameters(),
            ad::Adam::Options{options.lr}),
      rng_(seed) {
  if (options_.batch_size < 2) throw ConfigError("calibrator batch_size must be >= 2");
  check_lambda(options_.lambda1, "lambda1");
  check_lambda(options_.lambda2, "lambda2");
}

CalibratorEpochStats CalibratorTrainer::train_epoch(std::span<const CalibratorSample> atk,
                                                    std::span<const CalibratorSample> train) {
  if (atk.empty() || train.empty()) throw DataError("calibrator training needs both user sets");
  std::vector<std::size_t> ia(atk.size()), it(train.size());
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(it.begin(), it.end(), 0);
  std::shuffle(ia.begin(), ia.end(), rng_);
  std::shuffle(it.begin(), it.end(), rng_);

  const std::size_t total = atk.size() + train.size();
  const std::size_t batches = std::max<std::size_t>(
      1, std::min((total + static_cast<std::size_t>(options_.batch_size) - 1) /
                      static_cast<std::size_t>(options_.batch_size),
                  atk.size()));
  CalibratorEpochStats stats;
  const bool lct = mode_ == CalibratorMode::kLct;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t a0 = atk.size() * b / batches, a1 = atk.size() * (b + 1) / batches;
    const std::size_t t0 = train.size() * b / batches, t1 = train.size() * (b + 1) / batches;
    if (a1 == a0 || t1 == t0) continue;
    adam_.zero_grad();
    ad::Tape tape;
    std::vector<ad::Var> pa, pt, ls, rs;
    auto run = [&](const CalibratorSample& s, std::vector<ad::Var>& scores) {
      if (!lct) {
        scores.push_back(llm4dec_head(tape, params_, tape.constant(s.embedding.transpose()), true));
        return;
      }
      ad::Var r = summarize(tape, params_, tape.constant_ref(s.feedback), true);
      scores.push_back(project(tape, params_, r, true));
      rs.push_back(r);
      ls.push_back(dt_transform(tape, params_.dt, tape.constant(s.embedding.transpose()), true));
    };
    for (std::size_t i = a0; i < a1; ++i) run(atk[ia[i]], pa);
    for (std::size_t i = t0; i < t1; ++i) run(train[it[i]], pt);
    ad::Var p_atk = ad::stack_rows(pa), p_train = ad::stack_rows(pt);
    ad::Var lf = loss_fraud(p_atk, p_train);
    ad::Var ler = loss_entropy_reg(p_train, options_.entropy_form);
    ad::Var loss;
    double align = 0.0;
    if (lct) {
      ad::Var lal = loss_alignment(ad::stack_rows(ls), ad::stack_rows(rs));
      align = lal.scalar();
      loss = lct_total_loss(lf, ler, lal, options_.lambda1, options_.lambda2);
    } else {
      loss = llm4dec_total_loss(lf, ler, options_.lambda1);
    }
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite calibrator loss at epoch " + std::to_string(epoch_) +
                         ", batch " + std::to_string(b));
    }
    tape.backward(loss);
    adam_.step();
    stats.loss += value;
    stats.fraud += lf.scalar();
    stats.entropy += ler.scalar();
    stats.alignment += align;
    ++stats.batches;
  }
  if (!params_.all_finite()) {
    throw NumericError("non-finite calibrator parameters after epoch " + std::to_string(epoch_));
  }
  if (stats.batches > 0) {
    const double n = static_cast<double>(stats.batches);
    stats.loss /= n;
    stats.fraud /= n;
    stats.entropy /= n;
    stats.alignment /= n;
  }
  ++epoch_;
  return stats;
}

ScoredUsers score_users(const CalibratorParams& params, CalibratorMode mode,
                        std::span<const CalibratorSample> samples) {
  ScoredUsers out;
  out.p.reserve(samples.size());
  if (mode == CalibratorMode::kLct) {
    out.summaries.resize(static_cast<Eigen::Index>(samples.size()), params.k0.value.cols());
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (mode == CalibratorMode::kLct) {
      const ad::RowVector r = summarize(params, samples[i].feedback);
      out.summaries.row(static_cast<Eigen::Index>(i)) = r;
      out.p.push_back(project(params, r));
    } else {
      out.p.push_back(llm4dec_score(params, samples[i].embedding));
    }
  }
  return out;
}

double summary_spread(const ad::Matrix& summaries) {
  if (summaries.rows() < 2) return 0.0;
  const ad::RowVector mu = summaries.colwise().mean();
  const ad::Matrix c = summaries.rowwise() - mu;
  return c.array().square().sum() /
         (static_cast<double>(summaries.rows() - 1) * static_cast<double>(summaries.cols()));
}

}  // namespace lorec
