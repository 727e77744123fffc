#include "doctest.h"

#include <random>

#include "lorec/autodiff.hpp"
#include "support.hpp"

using namespace lorec;
using lorec::testing::gradient_check;

namespace {

ad::Param random_param(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return ad::Param(m);
}

// Checks d/dparams sum(f(a, b) .* probe) for a two-input op.
void check_op(const std::function<ad::Var(ad::Tape&, ad::Var, ad::Var)>& f, Eigen::Index ar,
              Eigen::Index ac, Eigen::Index br, Eigen::Index bc, double scale = 1.0) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    ad::Param a = random_param(ar, ac, rng, scale), b = random_param(br, bc, rng, scale);
    ad::Matrix probe;
    {
      ad::Tape t;
      probe = f(t, t.constant(a.value), t.constant(b.value)).value();
      for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = std::normal_distribution<>(0, 1)(rng);
    }
    auto build = [&](ad::Tape& t, bool train) {
      ad::Var out = f(t, t.bind(a, train), t.bind(b, train));
      return ad::sum(ad::mul(out, t.constant(probe)));
    };
    auto value = [&] {
      ad::Tape t;
      return build(t, false).scalar();
    };
    auto analytic = [&] {
      ad::Tape t;
      t.backward(build(t, true));
    };
    const auto r = gradient_check({&a, &b}, value, analytic);
    CHECK(r.max_rel < 1e-6);
  }
}

}  // namespace

TEST_CASE("linear algebra ops match finite differences") {
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::matmul(a, b); }, 3, 4, 4, 2);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::matmul_nt(a, b); }, 3, 4, 5, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::add(a, b); }, 3, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::sub(a, b); }, 3, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::mul(a, b); }, 3, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::add_row(a, b); }, 3, 4, 1, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::rowwise_dot(a, b); }, 3, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::hcat(a, b); }, 3, 2, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::vcat(a, b); }, 2, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::cosine(a, b); }, 1, 6, 1, 6);
}

TEST_CASE("nonlinearities and reductions match finite differences") {
  auto unary = [](ad::Var (*op)(ad::Var)) {
    return [op](ad::Tape&, ad::Var a, ad::Var b) { return ad::add(op(a), ad::scale(b, 0.5)); };
  };
  check_op(unary(ad::sigmoid), 3, 4, 3, 4);
  check_op(unary(ad::tanh), 3, 4, 3, 4);
  check_op(unary(ad::gelu), 3, 4, 3, 4);
  check_op(unary(ad::log_sigmoid), 3, 4, 3, 4);
  check_op(unary(ad::one_minus), 3, 4, 3, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var) { return ad::log(ad::sigmoid(a)); }, 3, 4, 1, 1);
  check_op([](ad::Tape&, ad::Var a, ad::Var) { return ad::mean(a); }, 3, 4, 1, 1);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) { return ad::sum(ad::mul(a, b)); }, 3, 4, 3, 4);
}

TEST_CASE("composite blocks match finite differences") {
  check_op([](ad::Tape&, ad::Var a, ad::Var) { return ad::softmax_rows(a, false); }, 4, 4, 1, 1);
  check_op([](ad::Tape&, ad::Var a, ad::Var) { return ad::softmax_rows(a, true); }, 4, 4, 1, 1);
  check_op([](ad::Tape& t, ad::Var a, ad::Var b) {
    ad::Var bias = t.constant(ad::Matrix::Constant(1, 5, 0.1));
    return ad::layer_norm(a, b, bias);
  }, 3, 5, 1, 5);
  check_op([](ad::Tape& t, ad::Var a, ad::Var b) {
    ad::Var bias = t.constant(ad::Matrix::Constant(1, 3, -0.2));
    return ad::affine(a, b, bias);
  }, 2, 4, 4, 3);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) {
    const std::vector<int> ids{2, 0, 2, 1};
    return ad::add(ad::gather_rows(a, ids), ad::scale(ad::slice_rows(b, 1, 4), 2.0));
  }, 3, 4, 6, 4);
  check_op([](ad::Tape&, ad::Var a, ad::Var b) {
    std::vector<ad::Var> rows{ad::row(a, 2), ad::row(b, 0), ad::row(a, 0)};
    return ad::stack_rows(rows);
  }, 3, 4, 2, 4);
}

TEST_CASE("weighted next-item BCE matches finite differences") {
  check_op([](ad::Tape&, ad::Var a, ad::Var) {
    const std::vector<int> pos{1, 3, 0};
    ad::Matrix mask = ad::Matrix::Ones(3, 5);
    mask(0, 1) = 0;
    mask(1, 3) = 0;
    mask(2, 0) = 0;
    mask(2, 4) = 0;
    return ad::next_item_bce(a, pos, mask, 0.7);
  }, 3, 5, 1, 1);
}

TEST_CASE("clamp passes gradient only inside the interval") {
  ad::Param a(ad::Matrix{{-2.0, 0.5, 3.0}});
  ad::Tape t;
  t.backward(ad::sum(ad::clamp(t.leaf(a), 0.0, 1.0)));
  CHECK(a.grad(0, 0) == 0.0);
  CHECK(a.grad(0, 1) == 1.0);
  CHECK(a.grad(0, 2) == 0.0);
}

TEST_CASE("Adam moves a quadratic toward its minimum") {
  ad::Param x(ad::Matrix::Constant(1, 3, 2.0));
  ad::Adam opt({&x}, {0.1});
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    ad::Tape t;
    ad::Var v = t.leaf(x);
    t.backward(ad::sum(ad::mul(v, v)));
    opt.step();
  }
  CHECK(x.value.norm() < 1e-2);
  CHECK(opt.steps() == 300);
}

TEST_CASE("stable scalar helpers") {
  CHECK(ad::sigmoid(0.0) == doctest::Approx(0.5));
  CHECK(std::isfinite(ad::log_sigmoid(-800.0)));
  CHECK(ad::log_sigmoid(-800.0) == doctest::Approx(-800.0));
  CHECK(ad::sigmoid(800.0) == 1.0);
}
