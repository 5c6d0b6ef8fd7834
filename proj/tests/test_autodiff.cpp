#include <gtest/gtest.h>

#include <functional>

#include "maskdiff/autodiff.hpp"
#include "oracle.hpp"

using namespace maskdiff;
using ad::Tape;

namespace {

using Build = std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>;

Matrix random(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.uniform(lo, hi);
  return m;
}

// Scalar probe: sum of output entries weighted by a fixed random matrix.
double probe(const std::vector<Matrix>& inputs, const Build& build, const Matrix& w) {
  Tape tape(false);
  std::vector<Tape::Id> ids;
  for (const auto& m : inputs) ids.push_back(tape.param(m, nullptr));
  const Matrix& y = tape.value(build(tape, ids));
  double acc = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) acc += y.flat()[k] * w.flat()[k];
  return acc;
}

// Checks every input coordinate of an op against central differences.
void check_gradients(std::vector<Matrix> inputs, const Build& build, double tol = 1e-6) {
  Rng rng(99);
  Matrix w;
  {
    Tape t(false);
    std::vector<Tape::Id> ids;
    for (const auto& m : inputs) ids.push_back(t.param(m, nullptr));
    const Matrix& y = t.value(build(t, ids));
    w = random(y.rows(), y.cols(), rng);
  }
  std::vector<Matrix> grads;
  for (const auto& m : inputs) grads.emplace_back(m.rows(), m.cols());
  {
    Tape tape;
    std::vector<Tape::Id> ids;
    for (std::size_t k = 0; k < inputs.size(); ++k) ids.push_back(tape.param(inputs[k], &grads[k]));
    tape.backward(build(tape, ids), w);
  }
  const double h = 1e-6;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t k = 0; k < inputs[a].size(); ++k) {
      const double x = inputs[a].flat()[k];
      inputs[a].flat()[k] = x + h;
      const double up = probe(inputs, build, w);
      inputs[a].flat()[k] = x - h;
      const double dn = probe(inputs, build, w);
      inputs[a].flat()[k] = x;
      const double fd = (up - dn) / (2 * h);
      EXPECT_NEAR(grads[a].flat()[k], fd, tol * (1.0 + std::abs(fd)))
          << "input " << a << " coordinate " << k;
    }
  }
}

}  // namespace

TEST(Autodiff, Linear) {
  Rng rng(1);
  check_gradients({random(5, 4, rng), random(4, 3, rng), random(1, 3, rng)},
                  [](Tape& t, const auto& x) { return t.linear(x[0], x[1], x[2]); });
}

TEST(Autodiff, LinearForwardValue) {
  Rng rng(2);
  const Matrix x = random(3, 4, rng), w = random(4, 2, rng), b = random(1, 2, rng);
  Tape t(false);
  const Matrix& y = t.value(t.linear(t.param(x, nullptr), t.param(w, nullptr), t.param(b, nullptr)));
  const Matrix ref = oracle::matmul(x, w);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(y(i, j), ref(i, j) + b(0, j), 1e-14);
}

TEST(Autodiff, ElementwiseAndStructural) {
  Rng rng(3);
  check_gradients({random(4, 3, rng), random(4, 3, rng)},
                  [](Tape& t, const auto& x) { return t.add(x[0], x[1]); });
  check_gradients({random(4, 3, rng), random(1, 3, rng)},
                  [](Tape& t, const auto& x) { return t.add_row(x[0], x[1]); });
  check_gradients({random(1, 3, rng)},
                  [](Tape& t, const auto& x) { return t.broadcast_rows(x[0], 5); });
  check_gradients({random(4, 3, rng), random(4, 2, rng)},
                  [](Tape& t, const auto& x) { return t.concat_cols(x[0], x[1]); });
  check_gradients({random(4, 6, rng)},
                  [](Tape& t, const auto& x) { return t.slice_cols(x[0], 2, 3); });
  check_gradients({random(4, 5, rng, -3, 3)}, [](Tape& t, const auto& x) { return t.silu(x[0]); });
  check_gradients({random(4, 5, rng, -3, 3)}, [](Tape& t, const auto& x) { return t.gelu(x[0]); });
  check_gradients({random(4, 3, rng), random(4, 3, rng), random(1, 3, rng)},
                  [](Tape& t, const auto& x) { return t.gated_residual(x[0], x[1], x[2]); });
}

TEST(Autodiff, DualAdaLn) {
  Rng rng(4);
  check_gradients({random(8, 6, rng, -2, 2), random(1, 6, rng), random(1, 6, rng), random(2, 1, rng)},
                  [](Tape& t, const auto& x) { return t.dual_ada_ln(x[0], x[1], x[2], x[3], 4, 1e-5); });
}

TEST(Autodiff, DualAdaLnFlooredRowIsDifferentiable) {
  Rng rng(5);
  Matrix h = random(4, 5, rng);
  for (std::size_t c = 0; c < 5; ++c) h(1, c) = 0.3 + 1e-5 * c;  // variance far under the floor
  check_gradients({h, random(1, 5, rng), random(1, 5, rng), random(2, 1, rng)},
                  [](Tape& t, const auto& x) { return t.dual_ada_ln(x[0], x[1], x[2], x[3], 2, 1e-5); });
}

TEST(Autodiff, Attention) {
  Rng rng(6);
  check_gradients({random(5, 4, rng), random(5, 4, rng), random(5, 4, rng)},
                  [](Tape& t, const auto& x) { return t.attention(x[0], x[1], x[2], 2); });
}

TEST(Autodiff, EmbeddingSum) {
  Rng rng(7);
  const std::vector<std::size_t> idx = {0, 2, 1, 2, 0, 0, 2, 1};
  check_gradients({random(3, 4, rng), random(3, 4, rng)}, [&](Tape& t, const auto& x) {
    const std::vector<Tape::Id> tabs = {x[0], x[1]};
    return t.embedding_sum(tabs, idx, 4);
  });
}

TEST(Autodiff, Composite) {
  Rng rng(8);
  check_gradients({random(8, 4, rng), random(4, 4, rng), random(1, 4, rng), random(1, 4, rng)},
                  [](Tape& t, const auto& x) {
                    const auto h = t.gelu(t.linear(x[0], x[1], x[2]));
                    const auto a = t.attention(h, h, t.silu(h), 2);
                    return t.gated_residual(x[0], a, x[3]);
                  });
}

TEST(Autodiff, SharedParameterAccumulates) {
  Rng rng(9);
  check_gradients({random(3, 3, rng)}, [](Tape& t, const auto& x) {
    return t.add(t.silu(x[0]), t.gelu(x[0]));
  });
}

TEST(Autodiff, ShapeAndModeErrors) {
  Tape t;
  const Matrix a(2, 3), b(3, 2);
  Matrix g(2, 2);
  EXPECT_THROW(t.param(a, &g), ShapeError);
  const auto ia = t.param(a, nullptr), ib = t.param(b, nullptr);
  EXPECT_THROW(t.add(ia, ib), ShapeError);
  EXPECT_THROW(t.slice_cols(ia, 2, 2), ShapeError);
  EXPECT_THROW(t.seed(ia, Matrix(3, 3)), ShapeError);
  Tape off(false);
  const auto ic = off.param(a, nullptr);
  EXPECT_THROW(off.seed(ic, Matrix(2, 3)), InvalidInput);
}
