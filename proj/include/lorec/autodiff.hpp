#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Parameters enter the
// tape as leaves that accumulate directly into Param::grad, so a training step
// is: build the graph, call backward() on a 1x1 loss, step the optimizer.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lorec::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

struct Param {
  Matrix value;
  Matrix grad;

  Param() = default;
  explicit Param(Matrix v) : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  bool all_finite() const { return value.allFinite(); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Non-owning constant; `value` must outlive the tape.
  Var constant_ref(const Matrix& value);
  Var leaf(Param& param);
  // Leaf when trainable, otherwise a constant view of the parameter value.
  Var bind(const Param& param, bool trainable);

  // Records an op result. `backward` receives the output gradient and must
  // accumulate into the parents via grad().
  Var record(Matrix value, bool requires_grad, Backward backward);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, allocated (zeroed) on first access. For
  // parameter leaves this is the parameter's own gradient.
  Matrix& grad(int id);

  // Reverse sweep from a 1x1 root.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Param* param = nullptr;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool grad_ready = false;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// --- linear algebra -------------------------------------------------------
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1xN row over every row of a
Var affine(Var x, Var weight, Var bias);
Var rowwise_dot(Var a, Var b);  // Lx1

// --- elementwise nonlinearities -------------------------------------------
Var sigmoid(Var a);
Var tanh(Var a);
Var gelu(Var a);
Var log(Var a);
Var log_sigmoid(Var a);
Var one_minus(Var a);
Var clamp(Var a, double lo, double hi);

// --- shape ----------------------------------------------------------------
Var gather_rows(Var table, std::span<const int> ids);
Var row(Var a, Eigen::Index i);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var hcat(Var a, Var b);
Var vcat(Var a, Var b);
Var stack_rows(std::span<const Var> rows);

// --- reductions -----------------------------------------------------------
Var sum(Var a);
Var mean(Var a);
Var cosine(Var a, Var b);  // two 1xN rows -> 1x1

// --- composite blocks -----------------------------------------------------
// Row softmax. When causal, entry (i, j) with j > i is masked out.
Var softmax_rows(Var a, bool causal);
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-6);

// Weighted next-item binary cross-entropy over a full logit matrix:
//   -w * sum_i [ log s(z_{i,pos_i}) + sum_j mask_ij log(1 - s(z_ij)) ]
Var next_item_bce(Var logits, std::span<const int> positives, Matrix negative_mask,
                  double weight);

// --- optimisation ----------------------------------------------------------
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<Param*> params, Options options);

  void zero_grad();
  void step();
  long steps() const { return t_; }

 private:
  std::vector<Param*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  Options options_;
  long t_ = 0;
};

// Numerically stable scalar helpers shared by the rest of the library.
double sigmoid(double x);
double log_sigmoid(double x);

}  // namespace lorec::ad
