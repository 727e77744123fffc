#include "lorec/seqrec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "lorec/errors.hpp"
#include "lorec/llm_bridge.hpp"

namespace lorec {

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'O', 'R', 'E', 'C', 'R', 'S', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

ad::Param uniform_param(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return ad::Param(std::move(m));
}

ad::Param constant_param(Eigen::Index rows, Eigen::Index cols, double value) {
  return ad::Param(ad::Matrix::Constant(rows, cols, value));
}

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("checkpoint truncated");
  return v;
}

void write_matrix(std::ostream& out, const ad::Matrix& m) {
  write_pod<std::int64_t>(out, m.rows());
  write_pod<std::int64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

ad::Matrix read_matrix(std::istream& in) {
  const auto rows = read_pod<std::int64_t>(in);
  const auto cols = read_pod<std::int64_t>(in);
  if (rows < 0 || cols < 0 || rows * cols > (std::int64_t{1} << 32)) {
    throw DataError("checkpoint: implausible matrix shape");
  }
  ad::Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  if (!in) throw DataError("checkpoint truncated");
  return m;
}

bool same_bits(const ad::Matrix& a, const ad::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

std::string_view to_string(EncoderMode mode) { return mode == EncoderMode::kId ? "id" : "text"; }

std::string_view to_string(BackboneKind kind) {
  return kind == BackboneKind::kSelfAttention ? "self_attention" : "recurrent";
}

EncoderMode parse_encoder_mode(std::string_view text) {
  if (text == "id") return EncoderMode::kId;
  if (text == "text") return EncoderMode::kText;
  throw ConfigError("unknown encoder mode '" + std::string(text) + "'");
}

BackboneKind parse_backbone_kind(std::string_view text) {
  if (text == "self_attention" || text == "sasrec") return BackboneKind::kSelfAttention;
  if (text == "recurrent" || text == "gru4rec" || text == "gru") return BackboneKind::kRecurrent;
  throw ConfigError("unknown backbone '" + std::string(text) + "'");
}

NegativePolicy parse_negative_policy(std::string_view text) {
  if (text == "auto") return NegativePolicy::kAuto;
  if (text == "exact") return NegativePolicy::kExact;
  if (text == "sampled") return NegativePolicy::kSampled;
  throw ConfigError("unknown negative policy '" + std::string(text) + "'");
}

std::string_view to_string(NegativePolicy policy) {
  switch (policy) {
    case NegativePolicy::kAuto: return "auto";
    case NegativePolicy::kExact: return "exact";
    case NegativePolicy::kSampled: return "sampled";
  }
  return "auto";
}

ad::Matrix item_text_features(const ItemCatalog& catalog, EmbeddingProvider& provider) {
  ad::Matrix out(static_cast<Eigen::Index>(catalog.size()), provider.dimension());
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const ItemRecord& r = catalog.items()[i];
    try {
      out.row(static_cast<Eigen::Index>(i)) = provider.embed(r.title + "; " + r.category).transpose();
    } catch (const ProviderError& e) {
      throw ProviderError("item '" + r.item_id + "': " + e.what());
    }
  }
  return out;
}

// --- RecommenderState ---------------------------------------------------------

RecommenderState RecommenderState::create(const RecommenderConfig& config, int n_items,
                                          std::uint64_t seed,
                                          std::optional<ad::Matrix> text_features) {
  if (config.dim < 1 || config.max_len < 1 || n_items < 1) {
    throw ConfigError("recommender: dim, max_len and n_items must be positive");
  }
  if (config.backbone == BackboneKind::kSelfAttention && config.blocks < 1) {
    throw ConfigError("recommender: need at least one attention block");
  }
  RecommenderState s;
  s.config_ = config;
  s.n_items_ = n_items;
  const int d = config.dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::mt19937_64 rng(seed);

  if (config.encoder == EncoderMode::kId) {
    s.item_table_ = uniform_param(n_items, d, bound, rng);
  } else {
    if (!text_features) throw ConfigError("text encoder requires provider features");
    if (text_features->rows() != n_items) throw ConfigError("text features do not cover catalog");
    s.text_features_ = std::move(text_features);
    s.proj_w_ = uniform_param(s.text_features_->cols(), d, bound, rng);
    s.proj_b_ = constant_param(1, d, 0.0);
  }

  if (config.backbone == BackboneKind::kSelfAttention) {
    s.positions_ = uniform_param(config.max_len, d, bound, rng);
    for (int b = 0; b < config.blocks; ++b) {
      AttentionBlockParams blk;
      blk.ln1_gain = constant_param(1, d, 1.0);
      blk.ln1_bias = constant_param(1, d, 0.0);
      blk.wq = uniform_param(d, d, bound, rng);
      blk.bq = constant_param(1, d, 0.0);
      blk.wk = uniform_param(d, d, bound, rng);
      blk.bk = constant_param(1, d, 0.0);
      blk.wv = uniform_param(d, d, bound, rng);
      blk.bv = constant_param(1, d, 0.0);
      blk.ln2_gain = constant_param(1, d, 1.0);
      blk.ln2_bias = constant_param(1, d, 0.0);
      blk.w1 = uniform_param(d, d, bound, rng);
      blk.b1 = constant_param(1, d, 0.0);
      blk.w2 = uniform_param(d, d, bound, rng);
      blk.b2 = constant_param(1, d, 0.0);
      s.blocks_.push_back(std::move(blk));
    }
    s.final_gain_ = constant_param(1, d, 1.0);
    s.final_bias_ = constant_param(1, d, 0.0);
  } else {
    s.gru_wz_ = uniform_param(d, d, bound, rng);
    s.gru_uz_ = uniform_param(d, d, bound, rng);
    s.gru_bz_ = constant_param(1, d, 0.0);
    s.gru_wr_ = uniform_param(d, d, bound, rng);
    s.gru_ur_ = uniform_param(d, d, bound, rng);
    s.gru_br_ = constant_param(1, d, 0.0);
    s.gru_wh_ = uniform_param(d, d, bound, rng);
    s.gru_uh_ = uniform_param(d, d, bound, rng);
    s.gru_bh_ = constant_param(1, d, 0.0);
  }
  return s;
}

void RecommenderState::for_each_param(
    const std::function<void(const std::string&, ad::Param&)>& fn) {
  if (config_.encoder == EncoderMode::kId) {
    fn("encoder.table", item_table_);
  } else {
    fn("encoder.proj_w", proj_w_);
    fn("encoder.proj_b", proj_b_);
  }
  if (config_.backbone == BackboneKind::kSelfAttention) {
    fn("sa.positions", positions_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "sa.block" + std::to_string(b) + ".";
      AttentionBlockParams& k = blocks_[b];
      fn(p + "ln1_gain", k.ln1_gain);
      fn(p + "ln1_bias", k.ln1_bias);
      fn(p + "wq", k.wq);
      fn(p + "bq", k.bq);
      fn(p + "wk", k.wk);
      fn(p + "bk", k.bk);
      fn(p + "wv", k.wv);
      fn(p + "bv", k.bv);
      fn(p + "ln2_gain", k.ln2_gain);
      fn(p + "ln2_bias", k.ln2_bias);
      fn(p + "w1", k.w1);
      fn(p + "b1", k.b1);
      fn(p + "w2", k.w2);
      fn(p + "b2", k.b2);
    }
    fn("sa.final_gain", final_gain_);
    fn("sa.final_bias", final_bias_);
  } else {
    fn("gru.wz", gru_wz_);
    fn("gru.uz", gru_uz_);
    fn("gru.bz", gru_bz_);
    fn("gru.wr", gru_wr_);
    fn("gru.ur", gru_ur_);
    fn("gru.br", gru_br_);
    fn("gru.wh", gru_wh_);
    fn("gru.uh", gru_uh_);
    fn("gru.bh", gru_bh_);
  }
}

void RecommenderState::for_each_param(
    const std::function<void(const std::string&, const ad::Param&)>& fn) const {
  const_cast<RecommenderState*>(this)->for_each_param(
      [&fn](const std::string& name, ad::Param& p) { fn(name, p); });
}

std::vector<ad::Param*> RecommenderState::parameters() {
  std::vector<ad::Param*> out;
  for_each_param([&out](const std::string&, ad::Param& p) { out.push_back(&p); });
  return out;
}

bool RecommenderState::all_finite() const {
  bool ok = true;
  for_each_param([&ok](const std::string&, const ad::Param& p) { ok = ok && p.all_finite(); });
  return ok;
}

ad::Var RecommenderState::item_table(ad::Tape& tape, bool trainable) const {
  if (config_.encoder == EncoderMode::kId) return tape.bind(item_table_, trainable);
  ad::Var x = tape.constant_ref(*text_features_);
  return ad::affine(x, tape.bind(proj_w_, trainable), tape.bind(proj_b_, trainable));
}

ad::Var RecommenderState::forward(ad::Tape& tape, ad::Var items,
                                  std::span<const ItemIndex> sequence, bool trainable) const {
  if (sequence.empty()) throw DataError("forward: empty sequence");
  if (static_cast<int>(sequence.size()) > config_.max_len) {
    throw DataError("forward: sequence of length " + std::to_string(sequence.size()) +
                    " exceeds max_len " + std::to_string(config_.max_len));
  }
  for (ItemIndex v : sequence) {
    if (v < 0 || v >= n_items_) throw DataError("forward: item index out of catalog");
  }
  ad::Var x = ad::gather_rows(items, sequence);
  return config_.backbone == BackboneKind::kSelfAttention ? self_attention(tape, x, trainable)
                                                          : recurrent(tape, x, trainable);
}

ad::Var RecommenderState::self_attention(ad::Tape& tape, ad::Var x, bool trainable) const {
  const Eigen::Index len = x.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.dim));
  x = ad::add(x, ad::slice_rows(tape.bind(positions_, trainable), 0, len));
  auto bind = [&](const ad::Param& p) { return tape.bind(p, trainable); };
  for (const AttentionBlockParams& b : blocks_) {
    ad::Var h = ad::layer_norm(x, bind(b.ln1_gain), bind(b.ln1_bias));
    ad::Var q = ad::affine(h, bind(b.wq), bind(b.bq));
    ad::Var k = ad::affine(h, bind(b.wk), bind(b.bk));
    ad::Var v = ad::affine(h, bind(b.wv), bind(b.bv));
    ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt_d), /*causal=*/true);
    x = ad::add(x, ad::matmul(att, v));
    ad::Var h2 = ad::layer_norm(x, bind(b.ln2_gain), bind(b.ln2_bias));
    ad::Var f = ad::affine(ad::gelu(ad::affine(h2, bind(b.w1), bind(b.b1))), bind(b.w2), bind(b.b2));
    x = ad::add(x, f);
  }
  return ad::layer_norm(x, bind(final_gain_), bind(final_bias_));
}

ad::Var RecommenderState::recurrent(ad::Tape& tape, ad::Var x, bool trainable) const {
  auto bind = [&](const ad::Param& p) { return tape.bind(p, trainable); };
  ad::Var xz = ad::affine(x, bind(gru_wz_), bind(gru_bz_));
  ad::Var xr = ad::affine(x, bind(gru_wr_), bind(gru_br_));
  ad::Var xh = ad::affine(x, bind(gru_wh_), bind(gru_bh_));
  ad::Var uz = bind(gru_uz_), ur = bind(gru_ur_), uh = bind(gru_uh_);
  std::vector<ad::Var> states;
  ad::Var h;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    ad::Var z, r, c;
    if (t == 0) {
      // h_0 = 0: the recurrent terms vanish and h_1 = z * c.
      z = ad::sigmoid(ad::row(xz, 0));
      c = ad::tanh(ad::row(xh, 0));
      h = ad::mul(z, c);
    } else {
      z = ad::sigmoid(ad::add(ad::row(xz, t), ad::matmul(h, uz)));
      r = ad::sigmoid(ad::add(ad::row(xr, t), ad::matmul(h, ur)));
      c = ad::tanh(ad::add(ad::row(xh, t), ad::matmul(ad::mul(r, h), uh)));
      h = ad::add(h, ad::mul(z, ad::sub(c, h)));
    }
    states.push_back(h);
  }
  return ad::stack_rows(states);
}

ad::Matrix RecommenderState::item_embeddings() const {
  ad::Tape tape;
  return item_table(tape, false).value();
}

ad::Matrix RecommenderState::forward(std::span<const ItemIndex> sequence) const {
  ad::Tape tape;
  ad::Var items = item_table(tape, false);
  return forward(tape, items, sequence, false).value();
}

ad::Vector RecommenderState::next_scores(std::span<const ItemIndex> history) const {
  if (history.empty()) throw DataError("next_scores: empty history");
  const std::size_t max_len = static_cast<std::size_t>(config_.max_len);
  if (history.size() > max_len) history = history.subspan(history.size() - max_len);
  ad::Tape tape;
  ad::Var items = item_table(tape, false);
  ad::Var pred = forward(tape, items, history, false);
  return items.value() * pred.value().row(pred.rows() - 1).transpose();
}

void RecommenderState::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::int32_t>(out, static_cast<std::int32_t>(config_.backbone));
  write_pod<std::int32_t>(out, static_cast<std::int32_t>(config_.encoder));
  write_pod<std::int32_t>(out, config_.dim);
  write_pod<std::int32_t>(out, config_.max_len);
  write_pod<std::int32_t>(out, config_.blocks);
  write_pod<std::int32_t>(out, n_items_);
  write_pod<std::int64_t>(out, epochs_trained_);
  write_pod<std::uint8_t>(out, text_features_ ? 1 : 0);
  if (text_features_) write_matrix(out, *text_features_);
  std::uint32_t count = 0;
  for_each_param([&count](const std::string&, const ad::Param&) { ++count; });
  write_pod<std::uint32_t>(out, count);
  for_each_param([&out](const std::string& name, const ad::Param& p) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_matrix(out, p.value);
  });
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

RecommenderState RecommenderState::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError("'" + path.string() + "' is not a recommender checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported recommender checkpoint version " + std::to_string(version));
  }
  RecommenderConfig config;
  config.backbone = static_cast<BackboneKind>(read_pod<std::int32_t>(in));
  config.encoder = static_cast<EncoderMode>(read_pod<std::int32_t>(in));
  config.dim = read_pod<std::int32_t>(in);
  config.max_len = read_pod<std::int32_t>(in);
  config.blocks = read_pod<std::int32_t>(in);
  const int n_items = read_pod<std::int32_t>(in);
  const auto epochs = read_pod<std::int64_t>(in);
  std::optional<ad::Matrix> text;
  if (read_pod<std::uint8_t>(in) != 0) text = read_matrix(in);
  RecommenderState s = create(config, n_items, 0, std::move(text));
  s.epochs_trained_ = epochs;
  const auto count = read_pod<std::uint32_t>(in);
  std::map<std::string, ad::Matrix> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    stored[name] = read_matrix(in);
  }
  std::size_t matched = 0;
  s.for_each_param([&](const std::string& name, ad::Param& p) {
    auto it = stored.find(name);
    if (it == stored.end()) throw DataError("checkpoint lacks parameter '" + name + "'");
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw DataError("checkpoint parameter '" + name + "' has the wrong shape");
    }
    p.value = it->second;
    p.zero_grad();
    ++matched;
  });
  if (matched != stored.size()) throw DataError("checkpoint holds unexpected parameters");
  return s;
}

bool operator==(const RecommenderState& a, const RecommenderState& b) {
  if (a.config_.backbone != b.config_.backbone || a.config_.encoder != b.config_.encoder ||
      a.config_.dim != b.config_.dim || a.config_.max_len != b.config_.max_len ||
      a.config_.blocks != b.config_.blocks || a.n_items_ != b.n_items_ ||
      a.epochs_trained_ != b.epochs_trained_ ||
      a.text_features_.has_value() != b.text_features_.has_value()) {
    return false;
  }
  if (a.text_features_ && !same_bits(*a.text_features_, *b.text_features_)) return false;
  std::vector<const ad::Matrix*> pa, pb;
  a.for_each_param([&pa](const std::string&, const ad::Param& p) { pa.push_back(&p.value); });
  b.for_each_param([&pb](const std::string&, const ad::Param& p) { pb.push_back(&p.value); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!same_bits(*pa[i], *pb[i])) return false;
  }
  return true;
}

// --- scoring and ranking ------------------------------------------------------

double score(std::span<const double> e_item, std::span<const double> e_pred) {
  if (e_item.size() != e_pred.size()) throw std::invalid_argument("score: dimension mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < e_item.size(); ++i) dot += e_item[i] * e_pred[i];
  return ad::sigmoid(dot);
}

namespace {

// True when candidate a ranks ahead of b.
bool ahead(std::span<const double> scores, std::span<const int> lex_rank, ItemIndex a,
           ItemIndex b) {
  if (scores[a] != scores[b]) return scores[a] > scores[b];
  return lex_rank[a] < lex_rank[b];
}

}  // namespace

std::vector<ItemIndex> rank_items(std::span<const double> scores, std::span<const char> excluded,
                                  std::size_t k, std::span<const int> lex_rank) {
  std::vector<ItemIndex> pool;
  pool.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (excluded.empty() || !excluded[i]) pool.push_back(static_cast<ItemIndex>(i));
  }
  const std::size_t take = std::min(k, pool.size());
  auto cmp = [&](ItemIndex a, ItemIndex b) { return ahead(scores, lex_rank, a, b); };
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(),
                    cmp);
  pool.resize(take);
  return pool;
}

std::optional<std::size_t> rank_of(std::span<const double> scores, std::span<const char> excluded,
                                   ItemIndex item, std::span<const int> lex_rank) {
  if (!excluded.empty() && excluded[item]) return std::nullopt;
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (!excluded.empty() && excluded[j]) continue;
    if (static_cast<ItemIndex>(j) != item && ahead(scores, lex_rank, static_cast<ItemIndex>(j), item)) {
      ++rank;
    }
  }
  return rank;
}

std::vector<ItemIndex> recommend_topk(const RecommenderState& state, const ItemCatalog& catalog,
                                      std::span<const ItemIndex> history, std::size_t k,
                                      bool exclude_history) {
  if (k < 1) throw std::invalid_argument("recommend_topk: k must be >= 1");
  if (static_cast<std::size_t>(state.n_items()) != catalog.size()) {
    throw DataError("recommend_topk: state and catalog disagree on item count");
  }
  const ad::Vector s = state.next_scores(history);
  std::vector<char> excluded;
  if (exclude_history) {
    excluded.assign(catalog.size(), 0);
    for (ItemIndex v : history) excluded[static_cast<std::size_t>(v)] = 1;
  }
  return rank_items({s.data(), static_cast<std::size_t>(s.size())}, excluded, k,
                    catalog.lex_ranks());
}

// --- training -------------------------------------------------------------------

ad::Var user_loss(ad::Tape& tape, const RecommenderState& state, ad::Var items,
                  std::span<const ItemIndex> sequence, double weight, bool exact,
                  std::mt19937_64* rng, bool trainable) {
  const std::size_t n = sequence.size();
  if (n < 2) return tape.constant(ad::Matrix::Zero(1, 1));
  const int n_items = state.n_items();
  ad::Var pred = state.forward(tape, items, sequence.first(n - 1), trainable);
  std::vector<int> positives(sequence.begin() + 1, sequence.end());
  if (exact) {
    // Row i excludes every item of s_{1..i+1} from the negative set.
    ad::Matrix mask = ad::Matrix::Ones(static_cast<Eigen::Index>(n - 1), n_items);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = 0; j <= i + 1; ++j) mask(static_cast<Eigen::Index>(i), sequence[j]) = 0.0;
    }
    ad::Var logits = ad::matmul_nt(pred, items);
    return ad::next_item_bce(logits, positives, std::move(mask), weight);
  }
  if (rng == nullptr) throw std::invalid_argument("user_loss: sampled negatives need an rng");
  std::vector<int> negatives(n - 1);
  std::uniform_int_distribution<int> pick(0, n_items - 1);
  std::set<ItemIndex> seen(sequence.begin(), sequence.begin() + 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    seen.insert(sequence[i + 1]);
    if (seen.size() >= static_cast<std::size_t>(n_items)) {
      throw DataError("user_loss: no negative item available");
    }
    int j = pick(*rng);
    while (seen.count(j)) j = pick(*rng);
    negatives[i] = j;
  }
  ad::Var zp = ad::rowwise_dot(pred, ad::gather_rows(items, positives));
  ad::Var zn = ad::rowwise_dot(pred, ad::gather_rows(items, negatives));
  ad::Var ll = ad::add(ad::sum(ad::log_sigmoid(zp)), ad::sum(ad::log_sigmoid(ad::scale(zn, -1.0))));
  return ad::scale(ll, -weight);
}

double weighted_loss(const RecommenderState& state, const DataSplit& split,
                     std::span<const double> weights, bool exact) {
  if (!exact) throw std::invalid_argument("weighted_loss: value form needs exact negatives");
  double total = 0.0;
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    const double w = weights.empty() ? 1.0 : weights[u];
    if (w == 0.0) continue;
    ad::Tape tape;
    ad::Var items = state.item_table(tape, false);
    total += user_loss(tape, state, items, split.users[u].train, w, true, nullptr, false).scalar();
  }
  return total;
}

RecommenderTrainer::RecommenderTrainer(RecommenderState& state, TrainOptions options,
                                       std::uint64_t seed)
    : state_(state),
      options_(options),
      adam_(state.parameters(), ad::Adam::Options{options.lr}),
      rng_(seed) {
  if (options_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  switch (options_.negatives) {
    case NegativePolicy::kExact: exact_ = true; break;
    case NegativePolicy::kSampled: exact_ = false; break;
    case NegativePolicy::kAuto: exact_ = state.n_items() <= options_.exact_bound; break;
  }
}

double RecommenderTrainer::train_epoch(const DataSplit& split, std::span<const double> weights) {
  if (!weights.empty() && weights.size() != split.users.size()) {
    throw DataError("train: weights do not cover the split");
  }
  std::vector<std::size_t> order;
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    const double w = weights.empty() ? 1.0 : weights[u];
    if (!(w >= 0.0)) throw DataError("train: negative weight for user '" + split.users[u].user_id + "'");
    if (w > 0.0 && split.users[u].train.size() >= 2) order.push_back(u);
  }
  std::shuffle(order.begin(), order.end(), rng_);
  double total = 0.0;
  const std::size_t bs = static_cast<std::size_t>(options_.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    adam_.zero_grad();
    ad::Tape tape;
    ad::Var items = state_.item_table(tape, true);
    std::vector<ad::Var> losses;
    for (std::size_t b = start; b < end; ++b) {
      const std::size_t u = order[b];
      const double w = weights.empty() ? 1.0 : weights[u];
      losses.push_back(user_loss(tape, state_, items, split.users[u].train, w, exact_, &rng_, true));
    }
    ad::Var loss = ad::sum(ad::stack_rows(losses));
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite recommender loss at epoch " + std::to_string(epoch_) +
                         ", batch starting at user '" + split.users[order[start]].user_id + "'");
    }
    tape.backward(loss);
    adam_.step();
    total += value;
  }
  if (!state_.all_finite()) {
    throw NumericError("non-finite recommender parameters after epoch " + std::to_string(epoch_));
  }
  ++epoch_;
  state_.add_trained_epochs(1);
  return total;
}

RecommenderState train_weighted(RecommenderState state, const DataSplit& split,
                                std::span<const double> weights, const TrainOptions& options,
                                std::uint64_t seed) {
  RecommenderTrainer trainer(state, options, seed);
  for (int e = 0; e < options.epochs; ++e) trainer.train_epoch(split, weights);
  return state;
}

// --- evaluation -----------------------------------------------------------------

std::vector<ItemIndex> evaluation_history(const UserSplit& user, int max_len) {
  std::vector<ItemIndex> hist = user.train;
  hist.push_back(user.valid);
  if (static_cast<int>(hist.size()) > max_len) {
    hist.erase(hist.begin(), hist.end() - max_len);
  }
  return hist;
}

TopkMetrics evaluate_topk(const RecommenderState& state, const DataSplit& split, std::size_t k,
                          bool genuine_only, std::span<const int> lex_rank) {
  if (k < 1) throw std::invalid_argument("evaluate_topk: k must be >= 1");
  std::vector<int> identity;
  if (lex_rank.empty()) {
    identity.resize(static_cast<std::size_t>(state.n_items()));
    std::iota(identity.begin(), identity.end(), 0);
    lex_rank = identity;
  }
  TopkMetrics m;
  std::vector<char> excluded(static_cast<std::size_t>(state.n_items()));
  for (const UserSplit& u : split.users) {
    if (genuine_only && u.label != UserLabel::kGenuine) continue;
    const std::vector<ItemIndex> hist = evaluation_history(u, state.config().max_len);
    const ad::Vector s = state.next_scores(hist);
    std::fill(excluded.begin(), excluded.end(), 0);
    for (ItemIndex v : hist) excluded[static_cast<std::size_t>(v)] = 1;
    ++m.users;
    const auto rank = rank_of({s.data(), static_cast<std::size_t>(s.size())}, excluded, u.test, lex_rank);
    if (rank && *rank <= k) {
      m.hr += 1.0;
      m.ndcg += 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
    }
  }
  if (m.users == 0) throw DataError("evaluate_topk: no users to evaluate");
  m.hr /= static_cast<double>(m.users);
  m.ndcg /= static_cast<double>(m.users);
  return m;
}

}  // namespace lorec
