#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "cbx/error.hpp"
#include "cbx/matrix.hpp"
#include "cbx/tape.hpp"
#include "support.hpp"

using namespace cbx;
using cbx::testing::finite_difference;
using cbx::testing::random_matrix;
using cbx::testing::worst_mismatch;

namespace {

// Gradient of scalar(op(x)) checked against finite differences, where scalar
// contracts the output with fixed random weights so every entry matters.
void check_unary(const std::function<Var(const Var&)>& op, Matrix x, std::uint64_t seed, double rtol = 1e-5) {
  Rng rng(seed);
  Matrix weights;
  const auto eval = [&](const Matrix& at, bool grad) {
    Tape t;
    Var v = t.variable(at);
    Var y = op(v);
    if (weights.size() == 0) weights = random_matrix(rng, y.rows(), y.cols());
    Var loss = ad::sum_all(ad::mul(y, t.constant(weights)));
    if (!grad) return std::pair{loss.value().item(), Matrix()};
    return std::pair{loss.value().item(), backward(loss).grad(v)};
  };
  const Matrix analytic = eval(x, true).second;
  const Matrix numeric = finite_difference([&] { return eval(x, false).first; }, x);
  CHECK(worst_mismatch(analytic, numeric, rtol) == 0.0);
}

}  // namespace

TEST_CASE("matmul forward values") {
  const Matrix m{{1, 2}, {3, 4}};
  CHECK(matmul(Matrix::identity(2), m) == m);
  CHECK(matmul(m, Matrix{{1}, {1}}) == Matrix{{3}, {7}});
  CHECK(matmul_nt(m, m) == matmul(m, transpose(m)));
  CHECK(matmul_tn(m, m) == matmul(transpose(m), m));
  CHECK_THROWS_AS(matmul(m, Matrix(3, 1)), ShapeError);

  Tape t;
  CHECK_THROWS_AS(ad::matmul(t.variable(m), t.variable(Matrix(3, 1))), ShapeError);
}

TEST_CASE("matmul rows do not depend on other rows") {
  Rng rng(5);
  const Matrix a = random_matrix(rng, 7, 13);
  const Matrix b = random_matrix(rng, 13, 11);
  const Matrix full = matmul(a, b);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const Matrix row = matmul(Matrix::row(a.row_span(i)), b);
    for (std::size_t j = 0; j < b.cols(); ++j) CHECK(row(0, j) == full(i, j));
  }
}

TEST_CASE("backward of sum(A*B) matches finite differences") {
  Rng rng(11);
  Matrix a = random_matrix(rng, 3, 4);
  const Matrix b = random_matrix(rng, 4, 2);
  Tape t;
  Var va = t.variable(a);
  const Matrix analytic = backward(ad::sum_all(ad::matmul(va, t.constant(b)))).grad(va);
  const Matrix numeric = finite_difference(
      [&] {
        const Matrix c = matmul(a, b);
        return std::accumulate(c.values().begin(), c.values().end(), 0.0);
      },
      a);
  CHECK(worst_mismatch(analytic, numeric, 1e-5) == 0.0);
}

TEST_CASE("max0 and abs subgradients") {
  Tape t;
  Var neg = t.variable(Matrix::scalar(-0.3));
  Var pos = t.variable(Matrix::scalar(0.3));
  Var zero = t.variable(Matrix::scalar(0.0));
  Var a = ad::max0(neg), b = ad::max0(pos), c = ad::max0(zero);
  CHECK(a.value().item() == 0.0);
  CHECK(b.value().item() == doctest::Approx(0.3));
  CHECK(backward(a).grad(neg).item() == 0.0);
  CHECK(backward(b).grad(pos).item() == 1.0);
  CHECK(backward(c).grad(zero).item() == 0.0);
  CHECK(backward(ad::abs(zero)).grad(zero).item() == 0.0);
  CHECK(backward(ad::abs(neg)).grad(neg).item() == -1.0);
  CHECK(backward(ad::relu(zero)).grad(zero).item() == 0.0);
}

TEST_CASE("log rejects non-positive input") {
  Tape t;
  CHECK_THROWS_AS(ad::log(t.variable(Matrix{{1.0, 0.0}})), DomainError);
  CHECK_THROWS_AS(ad::log(t.variable(Matrix{{-2.0}})), DomainError);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t seed = 100 + trial;
    check_unary([](const Var& v) { return ad::tanh(v); }, random_matrix(rng, 3, 4), seed);
    check_unary([](const Var& v) { return ad::exp(v); }, random_matrix(rng, 3, 4), seed);
    check_unary([](const Var& v) { return ad::log(v); }, random_matrix(rng, 3, 4, 0.2, 2.0), seed);
    check_unary([](const Var& v) { return ad::scale(v, -1.7); }, random_matrix(rng, 2, 3), seed);
    check_unary([](const Var& v) { return ad::sum_rows(v); }, random_matrix(rng, 4, 3), seed);
    check_unary([](const Var& v) { return ad::mean_all(v); }, random_matrix(rng, 4, 3), seed);
    // piecewise ops away from the kink
    Matrix away = random_matrix(rng, 3, 3);
    for (double& x : away.values()) x = (x < 0 ? -0.1 : 0.1) + x;
    check_unary([](const Var& v) { return ad::max0(v); }, away, seed);
    check_unary([](const Var& v) { return ad::relu(v); }, away, seed);
    check_unary([](const Var& v) { return ad::abs(v); }, away, seed);
  }
}

TEST_CASE("binary ops and scalar broadcasting") {
  Rng rng(3);
  const Matrix other = random_matrix(rng, 3, 2);
  const Matrix s = Matrix::scalar(0.7);
  for (int trial = 0; trial < 3; ++trial) {
    check_unary([&](const Var& v) { return v + v.tape().constant(other); }, random_matrix(rng, 3, 2), trial);
    check_unary([&](const Var& v) { return v.tape().constant(other) - v; }, random_matrix(rng, 3, 2), trial);
    check_unary([&](const Var& v) { return v * v.tape().constant(other); }, random_matrix(rng, 3, 2), trial);
    check_unary([&](const Var& v) { return v * v; }, random_matrix(rng, 3, 2), trial);
    // scalar operand on either side, gradient flowing into the scalar
    check_unary([&](const Var& v) { return v * v.tape().constant(other); }, s, trial);
    check_unary([&](const Var& v) { return v.tape().constant(other) - v; }, s, trial);
    check_unary([&](const Var& v) { return ad::add_row_bias(v.tape().constant(other), v); }, random_matrix(rng, 1, 2),
                trial);
    check_unary([&](const Var& v) { return ad::matmul(v, v.tape().constant(transpose(other))); },
                random_matrix(rng, 4, 2), trial);
  }
  Tape t;
  CHECK_THROWS_AS(t.variable(Matrix(2, 3)) + t.variable(Matrix(3, 2)), ShapeError);
  CHECK_THROWS_AS(ad::add_row_bias(t.variable(Matrix(2, 3)), t.variable(Matrix(1, 2))), ShapeError);
}

TEST_CASE("softmax_row examples") {
  Tape t;
  const Matrix third = ad::softmax_row(t.constant(Matrix{{0, 0, 0}})).value();
  for (double p : third.values()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Matrix big = ad::softmax_row(t.constant(Matrix{{1000, 0}})).value();
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const bool mask[] = {false, true};
  const Matrix masked = ad::softmax_row(t.constant(Matrix{{1, 2}}), mask).value();
  CHECK(masked[0] == 1.0);
  CHECK(masked[1] == 0.0);

  const bool all[] = {true, true};
  CHECK_THROWS_AS(ad::softmax_row(t.constant(Matrix{{1, 2}}), all), InvalidCandidateSetError);
  CHECK_THROWS_AS(ad::softmax_rows(t.constant(Matrix{{1, 2}, {3, 4}}), {1, 1, 0, 0}), InvalidCandidateSetError);
}

TEST_CASE("softmax outputs are simplex points and gradients match finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 1 + rng.below(6);
    std::vector<std::uint8_t> present(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) present[r * cols + c] = rng.uniform() < 0.7;
      present[r * cols + rng.below(cols)] = 1;
    }
    Tape t;
    const Matrix logits = random_matrix(rng, rows, cols, -5.0, 5.0);
    const Matrix p = ad::softmax_rows(t.constant(logits), present).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double x = p(r, c);
        if (present[r * cols + c]) {
          CHECK(x > 0.0);
        } else {
          CHECK(x == 0.0);
        }
        s += x;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
    check_unary([&](const Var& v) { return ad::softmax_rows(v, present); }, logits, trial);
  }
}

TEST_CASE("gather pulls entries and leaves missing slots at zero") {
  Tape t;
  Var src = t.variable(Matrix{{1}, {2}, {3}});
  Var g = ad::gather(src, 2, 2, {0, 2, 1, ad::kNoSource});
  CHECK(g.value() == Matrix{{1, 3}, {2, 0}});
  const Matrix grad = backward(ad::sum_all(ad::mul(g, t.constant(Matrix{{1, 2}, {3, 4}})))).grad(src);
  CHECK(grad == Matrix{{1}, {3}, {2}});
  CHECK_THROWS(ad::gather(src, 1, 1, {7}));
}

TEST_CASE("backward contract") {
  Tape t;
  Var x = t.variable(Matrix{{1, -2, 3}});
  SUBCASE("non-scalar root is rejected") { CHECK_THROWS_AS(backward(x), ContractError); }
  SUBCASE("constant root gives zero gradients") {
    Var c = t.constant(Matrix::scalar(4.0));
    const Gradients g = backward(c);
    CHECK(g.grad(x) == Matrix(1, 3));
    CHECK_FALSE(g.reached(x));
  }
  SUBCASE("sum of squares gives 2x") {
    const Matrix g = backward(ad::sum_all(x * x)).grad(x);
    CHECK(g == Matrix{{2, -4, 6}});
  }
  SUBCASE("backward is linear in the root and leaves the tape untouched") {
    Var a = ad::sum_all(ad::tanh(x));
    Var b = ad::sum_all(ad::exp(ad::scale(x, 0.3)));
    const std::size_t size = t.size();
    const Matrix ga = backward(a).grad(x);
    const Matrix gb = backward(b).grad(x);
    Var ab = a + b;
    const Matrix gab = backward(ab).grad(x);
    CHECK(t.size() == size + 1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(gab[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-14));
    CHECK(backward(a).grad(x) == ga);
  }
}

TEST_CASE("tape evaluation is deterministic") {
  Rng rng(77);
  const Matrix a = random_matrix(rng, 6, 5), w = random_matrix(rng, 5, 3);
  const auto run = [&] {
    Tape t;
    Var va = t.variable(a);
    Var y = ad::sum_all(ad::tanh(ad::matmul(va, t.variable(w))));
    return std::pair{y.value(), backward(y).grad(va)};
  };
  CHECK(run() == run());
}
