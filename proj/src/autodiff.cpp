#include "lorec/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace lorec::ad {

namespace {

Tape& tape_of(Var a) {
  assert(a.valid());
  return *a.tape();
}

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("autodiff: operands live on different tapes");
}

void require_shape(bool ok, const char* op) {
  if (!ok) throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return -softplus(-x); }

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("autodiff: scalar() on a non-scalar node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::bind(const Param& param, bool trainable) {
  // Only trainable bindings ever write through the pointer.
  return trainable ? leaf(const_cast<Param&>(param)) : constant_ref(param.value);
}

Var Tape::leaf(Param& param) {
  Node n;
  n.param = &param;
  n.requires_grad = true;
  if (param.grad.rows() != param.value.rows() || param.grad.cols() != param.value.cols()) {
    param.zero_grad();
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[id];
  if (n.param) return n.param->value;
  if (n.ref) return *n.ref;
  return n.value;
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.param) return n.param->grad;
  if (!n.grad_ready) {
    const Matrix& v = value(id);
    n.grad.setZero(v.rows(), v.cols());
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::logic_error("autodiff: root belongs to another tape");
  if (root.value().size() != 1) throw std::logic_error("autodiff: backward() needs a 1x1 root");
  if (!requires_grad(root.id())) return;
  grad(root.id())(0, 0) += 1.0;
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.param || !n.grad_ready || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

// --- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(a.value() * b.value(), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "matmul_nt");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(a.value() * b.value().transpose(), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
    if (t.requires_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(a.value() + b.value(), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(a.value() - b.value(), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(a.value().cwiseProduct(b.value()), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.record(a.value() * s, t.requires_grad(ia),
                  [ia, s](Tape& t, const Matrix& g) { t.grad(ia) += g * s; });
}

Var add_row(Var a, Var r) {
  require_same_tape(a, r);
  require_shape(r.rows() == 1 && r.cols() == a.cols(), "add_row");
  Tape& t = tape_of(a);
  const int ia = a.id(), ir = r.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ir);
  Matrix out = a.value().rowwise() + r.value().row(0);
  return t.record(std::move(out), rg, [ia, ir](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

Var affine(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var rowwise_dot(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return t.record(std::move(out), rg, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia).array() += t.value(ib).array().colwise() * g.col(0).array();
    if (t.requires_grad(ib)) t.grad(ib).array() += t.value(ia).array().colwise() * g.col(0).array();
  });
}

// --- elementwise ----------------------------------------------------------

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return sigmoid(x); });
  Matrix saved = out;
  return t.record(std::move(out), t.requires_grad(ia),
                  [ia, s = std::move(saved)](Tape& t, const Matrix& g) {
                    t.grad(ia).array() += g.array() * s.array() * (1.0 - s.array());
                  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  Matrix saved = out;
  return t.record(std::move(out), t.requires_grad(ia),
                  [ia, y = std::move(saved)](Tape& t, const Matrix& g) {
                    t.grad(ia).array() += g.array() * (1.0 - y.array().square());
                  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return t.record(std::move(out), t.requires_grad(ia), [ia](Tape& t, const Matrix& g) {
    Matrix d = t.value(ia).unaryExpr([](double x) {
      const double u = kGeluC * (x + kGeluA * x * x * x);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    });
    t.grad(ia).array() += g.array() * d.array();
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.record(a.value().array().log().matrix(), t.requires_grad(ia),
                  [ia](Tape& t, const Matrix& g) {
                    t.grad(ia).array() += g.array() / t.value(ia).array();
                  });
}

Var log_sigmoid(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return log_sigmoid(x); });
  return t.record(std::move(out), t.requires_grad(ia), [ia](Tape& t, const Matrix& g) {
    Matrix d = t.value(ia).unaryExpr([](double x) { return sigmoid(-x); });
    t.grad(ia).array() += g.array() * d.array();
  });
}

Var one_minus(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.record((1.0 - a.value().array()).matrix(), t.requires_grad(ia),
                  [ia](Tape& t, const Matrix& g) { t.grad(ia) -= g; });
}

Var clamp(Var a, double lo, double hi) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.record(std::move(out), t.requires_grad(ia), [ia, lo, hi](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    Matrix& dst = t.grad(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (x(i) > lo && x(i) < hi) dst(i) += g(i);
    }
  });
}

// --- shape ----------------------------------------------------------------

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const int it = table.id();
  const Matrix& src = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), src.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= src.rows()) throw std::out_of_range("autodiff: gather index");
    out.row(static_cast<Eigen::Index>(i)) = src.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.record(std::move(out), t.requires_grad(it),
                  [it, idx = std::move(idx)](Tape& t, const Matrix& g) {
                    Matrix& dst = t.grad(it);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      dst.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                    }
                  });
}

Var row(Var a, Eigen::Index i) { return slice_rows(a, i, 1); }

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows");
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.record(a.value().middleRows(start, count), t.requires_grad(ia),
                  [ia, start, count](Tape& t, const Matrix& g) {
                    t.grad(ia).middleRows(start, count) += g;
                  });
}

Var hcat(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows(), "hcat");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Matrix out(a.rows(), ca + cb);
  out << a.value(), b.value();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(std::move(out), rg, [ia, ib, ca, cb](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g.leftCols(ca);
    if (t.requires_grad(ib)) t.grad(ib) += g.rightCols(cb);
  });
}

Var vcat(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "vcat");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  Matrix out(ra + rb, a.cols());
  out << a.value(), b.value();
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(std::move(out), rg, [ia, ib, ra, rb](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g.topRows(ra);
    if (t.requires_grad(ib)) t.grad(ib) += g.bottomRows(rb);
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw std::invalid_argument("autodiff: stack_rows of nothing");
  Tape& t = tape_of(rows.front());
  const Eigen::Index cols = rows.front().cols();
  Eigen::Index total = 0;
  for (const Var& r : rows) {
    require_shape(r.cols() == cols && r.tape() == &t, "stack_rows");
    total += r.rows();
  }
  Matrix out(total, cols);
  std::vector<std::pair<int, Eigen::Index>> parts;
  bool rg = false;
  Eigen::Index at = 0;
  for (const Var& r : rows) {
    out.middleRows(at, r.rows()) = r.value();
    parts.emplace_back(r.id(), r.rows());
    rg = rg || t.requires_grad(r.id());
    at += r.rows();
  }
  return t.record(std::move(out), rg, [parts = std::move(parts)](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (const auto& [id, n] : parts) {
      if (t.requires_grad(id)) t.grad(id) += g.middleRows(at, n);
      at += n;
    }
  });
}

// --- reductions -----------------------------------------------------------

Var sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), t.requires_grad(ia),
                  [ia](Tape& t, const Matrix& g) { t.grad(ia).array() += g(0, 0); });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("autodiff: mean of empty node");
  return scale(sum(a), 1.0 / n);
}

Var cosine(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "cosine");
  Tape& t = tape_of(a);
  const int ia = a.id(), ib = b.id();
  const double na = a.value().norm(), nb = b.value().norm();
  if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine similarity of a zero vector");
  const double c = a.value().row(0).dot(b.value().row(0)) / (na * nb);
  Matrix out(1, 1);
  out(0, 0) = c;
  const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
  return t.record(std::move(out), rg, [ia, ib, na, nb, c](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    const double go = g(0, 0);
    if (t.requires_grad(ia)) t.grad(ia) += go * (bv / (na * nb) - c * av / (na * na));
    if (t.requires_grad(ib)) t.grad(ib) += go * (av / (na * nb) - c * bv / (nb * nb));
  });
}

// --- composite blocks -----------------------------------------------------

Var softmax_rows(Var a, bool causal) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  const Matrix& x = a.value();
  require_shape(!causal || x.cols() >= x.rows(), "softmax_rows");
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index width = causal ? i + 1 : x.cols();
    auto xi = x.row(i).head(width);
    const double m = xi.maxCoeff();
    auto e = (xi.array() - m).exp();
    p.row(i).head(width) = (e / e.sum()).matrix();
  }
  Matrix saved = p;
  return t.record(std::move(p), t.requires_grad(ia),
                  [ia, s = std::move(saved)](Tape& t, const Matrix& g) {
                    Vector inner = g.cwiseProduct(s).rowwise().sum();
                    t.grad(ia).array() += s.array() * (g.colwise() - inner).array();
                  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  require_same_tape(a, gain);
  require_same_tape(a, bias);
  require_shape(gain.rows() == 1 && gain.cols() == a.cols() && bias.rows() == 1 &&
                    bias.cols() == a.cols(),
                "layer_norm");
  Tape& t = tape_of(a);
  const int ia = a.id(), ig = gain.id(), ib = bias.id();
  const Matrix& x = a.value();
  const double n = static_cast<double>(x.cols());
  Vector mu = x.rowwise().mean();
  Matrix centered = x.colwise() - mu;
  Vector inv_sd = ((centered.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_sd.array();
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix().rowwise() +
               bias.value().row(0);
  const bool rg = t.requires_grad(ia) || t.requires_grad(ig) || t.requires_grad(ib);
  return t.record(std::move(out), rg,
                  [ia, ig, ib, n, xh = std::move(xhat), isd = std::move(inv_sd)](
                      Tape& t, const Matrix& g) {
                    if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xh).colwise().sum();
                    if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
                    if (t.requires_grad(ia)) {
                      Matrix dxh = g.array().rowwise() * t.value(ig).row(0).array();
                      Vector m1 = dxh.rowwise().sum() / n;
                      Vector m2 = dxh.cwiseProduct(xh).rowwise().sum() / n;
                      Matrix dx = (dxh.colwise() - m1) - (xh.array().colwise() * m2.array()).matrix();
                      t.grad(ia) += (dx.array().colwise() * isd.array()).matrix();
                    }
                  });
}

Var next_item_bce(Var logits, std::span<const int> positives, Matrix negative_mask,
                  double weight) {
  Tape& t = tape_of(logits);
  const int il = logits.id();
  const Matrix& z = logits.value();
  require_shape(static_cast<Eigen::Index>(positives.size()) == z.rows() &&
                    negative_mask.rows() == z.rows() && negative_mask.cols() == z.cols(),
                "next_item_bce");
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    total += log_sigmoid(z(i, positives[i]));
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      if (negative_mask(i, j) != 0.0) total += log_sigmoid(-z(i, j));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = -weight * total;
  std::vector<int> pos(positives.begin(), positives.end());
  return t.record(std::move(out), t.requires_grad(il),
                  [il, weight, pos = std::move(pos), mask = std::move(negative_mask)](Tape& t,
                                                                          const Matrix& g) {
                    const Matrix& z = t.value(il);
                    Matrix& dz = t.grad(il);
                    const double s = weight * g(0, 0);
                    for (Eigen::Index i = 0; i < z.rows(); ++i) {
                      for (Eigen::Index j = 0; j < z.cols(); ++j) {
                        if (mask(i, j) != 0.0) dz(i, j) += s * sigmoid(z(i, j));
                      }
                      dz(i, pos[i]) -= s * sigmoid(-z(i, pos[i]));
                    }
                  });
}

// --- optimisation ----------------------------------------------------------

Adam::Adam(std::vector<Param*> params, Options options)
    : params_(std::move(params)), options_(options) {
  for (Param* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    if (p->grad.size() != p->value.size()) p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->grad.setZero();
}

void Adam::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    m_[k] = b1 * m_[k] + (1.0 - b1) * p.grad;
    v_[k] = b2 * v_[k] + (1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= options_.lr * (m_[k].array() / c1) /
                       ((v_[k].array() / c2).sqrt() + options_.eps);
  }
}

}  // namespace lorec::ad
