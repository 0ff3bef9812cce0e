#include <doctest.h>

#include <cmath>
#include <vector>

#include "anyshift/errors.hpp"
#include "anyshift/kernels.hpp"
#include "anyshift/rng.hpp"
#include "anyshift/tensor.hpp"
#include "grad_cases.hpp"

using namespace anyshift;
using anyshift::testing::randn;

TEST_CASE("every op passes finite differences") {
  auto rng = make_stream(21, StreamPurpose::Test);
  for (const auto& c : anyshift::testing::grad_cases()) {
    CAPTURE(c.name);
    for (int i = 0; i < 20; ++i) CHECK(c.run(rng).max_rel_error <= 1e-5);
  }
}

TEST_CASE("ops outside a tape scope record nothing") {
  Tape tape;
  Tensor a(Matrix::Ones(2, 2), true);
  const Tensor outside = sum(mul(a, a));
  CHECK(tape.size() == 0);
  CHECK(outside.node()->inputs.empty());
  {
    TapeScope scope(tape);
    const Tensor inside = sum(mul(a, a));
    CHECK(tape.size() == 2);
  }
  CHECK(Tape::active() == nullptr);
}

TEST_CASE("ops on tensors without grad are not taped") {
  Tape tape;
  TapeScope scope(tape);
  const Tensor c = add(Tensor(Matrix::Ones(2, 2)), Tensor(Matrix::Ones(2, 2)));
  CHECK(tape.size() == 0);
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("backward replay is bitwise reproducible") {
  auto rng = make_stream(22, StreamPurpose::Test);
  Tensor w = randn(5, 4, rng);
  const Tensor x = randn(3, 5, rng);
  w.set_requires_grad(true);
  std::vector<Matrix> grads;
  for (int rep = 0; rep < 2; ++rep) {
    w.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(softmax(gelu(matmul(x, w))));
      loss = add(loss, mean(exp(scale(matmul(x, w), 0.1))));
    }
    tape.backward(loss);
    grads.push_back(w.grad());
  }
  CHECK(grads[0] == grads[1]);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor a(Matrix::Constant(1, 1, 3.0), true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(a, a));
  }
  tape.backward(loss);
  CHECK(a.grad()(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("softmax matches a long double oracle") {
  auto rng = make_stream(23, StreamPurpose::Test);
  for (int t = 0; t < 50; ++t) {
    const Matrix x = 30.0 * standard_normal(3, 7, rng);
    const Matrix p = softmax(Tensor(x)).value();
    for (Index r = 0; r < x.rows(); ++r) {
      long double m = x(r, 0);
      for (Index c = 1; c < x.cols(); ++c) m = std::max<long double>(m, x(r, c));
      long double z = 0;
      for (Index c = 0; c < x.cols(); ++c) z += std::exp(static_cast<long double>(x(r, c)) - m);
      for (Index c = 0; c < x.cols(); ++c) {
        const long double ref = std::exp(static_cast<long double>(x(r, c)) - m) / z;
        CHECK(std::abs(static_cast<long double>(p(r, c)) - ref) <= 1e-15L);
      }
      CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
}

TEST_CASE("softmax is finite for huge logits") {
  Matrix x(1, 3);
  x << 1e300, -1e300, 0.0;
  const Matrix p = softmax(Tensor(x)).value();
  CHECK(p.allFinite());
  CHECK(p(0, 0) == 1.0);
}

TEST_CASE("cross entropy worked examples") {
  // uniform logits over 4 classes: ln 4
  CHECK(cross_entropy(Tensor(Matrix::Zero(2, 4)), std::vector<int>{0, 3}).item() == doctest::Approx(std::log(4.0)));
  Matrix l(1, 2);
  l << 2.0, 0.0;
  CHECK(cross_entropy(Tensor(l), std::vector<int>{0}).item() == doctest::Approx(std::log1p(std::exp(-2.0))));
  Matrix big(1, 2);
  big << 0.0, 1000.0;
  CHECK(cross_entropy(Tensor(big), std::vector<int>{0}).item() == doctest::Approx(1000.0));
}

TEST_CASE("cross entropy rejects bad labels") {
  CHECK_THROWS_AS(cross_entropy(Tensor(Matrix::Zero(1, 3)), std::vector<int>{3}), IndexError);
  CHECK_THROWS_AS(cross_entropy(Tensor(Matrix::Zero(2, 3)), std::vector<int>{0}), DimensionError);
}

TEST_CASE("layer norm worked example") {
  Matrix x(1, 4);
  x << 1, 2, 3, 4;
  const Tensor g(Shape{4}, Matrix::Ones(1, 4));
  const Tensor b(Shape{4}, Matrix::Zero(1, 4));
  const Matrix y = layer_norm(Tensor(x), g, b).value();
  const double inv = 1.0 / std::sqrt(1.25 + kLayerNormEps);
  CHECK(y(0, 0) == doctest::Approx(-1.5 * inv).epsilon(1e-14));
  CHECK(y(0, 3) == doctest::Approx(1.5 * inv).epsilon(1e-14));
  CHECK(y.sum() == doctest::Approx(0.0));
}

TEST_CASE("attention rows are convex combinations") {
  auto rng = make_stream(24, StreamPurpose::Test);
  const Matrix q = standard_normal(3, 8, rng), k = standard_normal(5, 8, rng);
  for (int h = 0; h < 2; ++h) {
    const Matrix p = attention_probabilities(q, k, 2, h);
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-14);
    CHECK(p.minCoeff() >= 0.0);
  }
  // constant values pass straight through
  const Matrix v = Matrix::Constant(5, 8, 2.5);
  const Matrix out = attention(Tensor(q), Tensor(k), Tensor(v), 2).value();
  CHECK((out.array() - 2.5).abs().maxCoeff() < 1e-14);
}

TEST_CASE("null sink with zero keys and values adds nothing") {
  auto rng = make_stream(25, StreamPurpose::Test);
  const Tensor q = randn(3, 4, rng);
  const Matrix out = attention(q, Tensor(Matrix::Zero(2, 4)), Tensor(Matrix::Zero(2, 4)), 2, true).value();
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(matmul(Tensor(Matrix::Zero(2, 3)), Tensor(Matrix::Zero(2, 3))), DimensionError);
  CHECK_THROWS_AS(add(Tensor(Matrix::Zero(2, 3)), Tensor(Matrix::Zero(3, 2))), DimensionError);
  CHECK_THROWS_AS(reshape(Tensor(Matrix::Zero(2, 3)), Shape{5}), DimensionError);
  CHECK_THROWS_AS(attention(Tensor(Matrix::Zero(2, 3)), Tensor(Matrix::Zero(2, 3)), Tensor(Matrix::Zero(2, 3)), 2),
                  DimensionError);
}

TEST_CASE("l2 normalized rows have unit norm") {
  auto rng = make_stream(26, StreamPurpose::Test);
  const Matrix y = l2_normalize_rows(randn(6, 5, rng)).value();
  CHECK((y.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-14);
}
