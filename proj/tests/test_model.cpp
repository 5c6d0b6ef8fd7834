#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "maskdiff/model.hpp"
#include "oracle.hpp"

using namespace maskdiff;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.length = 8;
  c.levels = 2;
  c.vocab = 4;
  c.width = 16;
  c.semantic_dim = 3;
  c.global_dim = 2;
  c.temporal_dim = 2;
  c.window = 4;
  c.blocks = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.time_dim = 8;
  return c;
}

Matrix random(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.uniform(-1.0, 1.0);
  return m;
}

ConditionBundle full_condition(const ModelConfig& c, Rng& rng) {
  ConditionBundle b;
  b.semantic = random(c.length, c.semantic_dim, rng);
  b.global_style = random(1, c.global_dim, rng);
  b.temporal_style = random(c.length / c.window, c.temporal_dim, rng);
  return b;
}

TokenGrid random_grid(const ModelConfig& c, Rng& rng, double mask_rate) {
  TokenGrid g(c.length, c.levels, c.vocab);
  for (auto& t : g.tokens())
    t = rng.bernoulli(mask_rate) ? kMask : static_cast<Token>(rng.below(c.vocab));
  return g;
}

OutputLoss dse_against(const TokenGrid& xt, const TokenGrid& x0, double t, const NoiseSchedule& s) {
  return [=](const ScoreField& f, std::span<double> g) { return dse_loss_with_grad(f, xt, x0, t, s, g); };
}

}  // namespace

TEST(DualAdaLn, HandComputedExample) {
  Matrix h(1, 2);
  h(0, 0) = 1.0;
  h(0, 1) = 3.0;
  const std::vector<double> gch = {1.0, 0.0}, bch = {0.5, 0.0}, gte = {2.0};
  const Matrix y = dual_ada_ln(h, gch, bch, gte, 1);
  EXPECT_NEAR(y(0, 0), -3.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 2.0, 1e-12);
}

TEST(DualAdaLn, IdentityModulationIsPlainNormalization) {
  Rng rng(1);
  const Matrix h = random(8, 6, rng);
  const Matrix y = dual_ada_ln(h, std::vector<double>(6, 0.0), std::vector<double>(6, 0.0),
                               std::vector<double>(2, 1.0), 4);
  for (std::size_t i = 0; i < 8; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mu += h(i, c);
    mu /= 6;
    for (std::size_t c = 0; c < 6; ++c) var += (h(i, c) - mu) * (h(i, c) - mu);
    var /= 6;
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y(i, c), (h(i, c) - mu) / std::sqrt(var), 1e-13);
  }
}

TEST(DualAdaLn, MatchesOracleAndUnitTemporalScaleIsAdaptiveLayerNorm) {
  Rng rng(2);
  const Matrix h = random(12, 5, rng);
  std::vector<double> gch(5), bch(5), gte(3), ones(3, 1.0);
  for (double& v : gch) v = rng.uniform(-1, 1);
  for (double& v : bch) v = rng.uniform(-1, 1);
  for (double& v : gte) v = rng.uniform(-2, 2);
  const Matrix y = dual_ada_ln(h, gch, bch, gte, 4);
  const Matrix ref = oracle::dual_ada_ln(h, gch, bch, gte, 4, 1e-5);
  for (std::size_t k = 0; k < y.size(); ++k) EXPECT_NEAR(y.flat()[k], ref.flat()[k], 1e-13);

  // gamma_te = 1: the result is exactly the adaptive norm computed with U = 1
  // and a unit temporal scale per frame.
  const Matrix a = dual_ada_ln(h, gch, bch, ones, 4);
  const Matrix b = dual_ada_ln(h, gch, bch, std::vector<double>(12, 1.0), 1);
  EXPECT_EQ(a, b);
  const Matrix plain = dual_ada_ln(h, std::vector<double>(5, 0.0), std::vector<double>(5, 0.0), ones, 4);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(a(i, c), (1.0 + gch[c]) * plain(i, c) + bch[c]);
}

TEST(DualAdaLn, ZeroTemporalScaleAnnihilates) {
  Rng rng(3);
  const Matrix y = dual_ada_ln(random(8, 4, rng), std::vector<double>(4, 0.3), std::vector<double>(4, 0.7),
                               std::vector<double>(2, 0.0), 4);
  for (double v : y.flat()) EXPECT_EQ(v, 0.0);
}

TEST(DualAdaLn, ConstantRowUsesFloor) {
  const Matrix y = dual_ada_ln(Matrix(4, 3, 2.5), std::vector<double>(3, 0.0), std::vector<double>(3, 0.25),
                               std::vector<double>(1, 1.0), 4);
  for (double v : y.flat()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, 0.25);
  }
}

TEST(DualAdaLn, WindowPreservingPermutationCommutes) {
  Rng rng(4);
  const Matrix h = random(12, 4, rng);
  std::vector<double> gch(4, 0.2), bch(4, -0.1), gte = {0.5, 1.5, -1.0};
  // Swap windows 0 and 2, and shuffle frames inside window 1.
  const std::vector<std::size_t> perm = {8, 9, 10, 11, 6, 4, 7, 5, 0, 1, 2, 3};
  const std::vector<double> gte_perm = {gte[2], gte[1], gte[0]};
  Matrix hp(12, 4);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 4; ++c) hp(i, c) = h(perm[i], c);
  const Matrix y = dual_ada_ln(h, gch, bch, gte, 4);
  const Matrix yp = dual_ada_ln(hp, gch, bch, gte_perm, 4);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(yp(i, c), y(perm[i], c));
}

TEST(DualAdaLn, ShapeErrors) {
  EXPECT_THROW(dual_ada_ln(Matrix(6, 2), std::vector<double>(2), std::vector<double>(2),
                           std::vector<double>(1), 4),
               ShapeError);
  EXPECT_THROW(dual_ada_ln(Matrix(4, 2), std::vector<double>(3), std::vector<double>(2),
                           std::vector<double>(1), 4),
               ShapeError);
}

TEST(Embed, ExamplesFromLookupStructure) {
  const ModelConfig c = small_config();
  ScoreNetwork zero(c);
  const Matrix e0 = zero.embed(TokenGrid(c.length, c.levels, c.vocab));
  for (double v : e0.flat()) EXPECT_EQ(v, 0.0);

  Rng rng(5);
  ScoreNetwork net(c);
  net.init(rng);
  const Matrix em = net.embed(TokenGrid(c.length, c.levels, c.vocab));
  const Matrix& t0 = net.parameters()[net.index_of("embed.level0")].value;
  const Matrix& t1 = net.parameters()[net.index_of("embed.level1")].value;
  EXPECT_EQ(t0.rows(), c.vocab + 1);
  for (std::size_t i = 0; i < c.length; ++i)
    for (std::size_t k = 0; k < c.width; ++k) EXPECT_EQ(em(i, k), t0(c.vocab, k) + t1(c.vocab, k));

  TokenGrid a = random_grid(c, rng, 0.3), b = a;
  b.at(5, 1) = b.at(5, 1) == 0 ? 1 : 0;
  const Matrix ea = net.embed(a), eb = net.embed(b);
  for (std::size_t i = 0; i < c.length; ++i) {
    bool differs = false;
    for (std::size_t k = 0; k < c.width; ++k) differs |= ea(i, k) != eb(i, k);
    EXPECT_EQ(differs, i == 5);
  }
}

TEST(ScoreNetwork, ParameterShapesDependOnlyOnConfig) {
  const ModelConfig c = small_config();
  ScoreNetwork a(c), b(c);
  Rng rng(6);
  a.init(rng);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t k = 0; k < a.parameters().size(); ++k) {
    EXPECT_EQ(a.parameters()[k].name, b.parameters()[k].name);
    EXPECT_TRUE(a.parameters()[k].value.same_shape(b.parameters()[k].value));
  }
  EXPECT_GT(a.parameter_count(), 0u);
  EXPECT_THROW(a.index_of("nope"), InvalidInput);
}

TEST(ScoreNetwork, OutputsPositiveFiniteAndDeterministic) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(7);
  net.init_uniform(rng, -0.1, 0.1);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenGrid xt = random_grid(c, rng, 0.5);
    const double t = rng.uniform(0.01, 1.0);
    const ScoreField s = net.forward(xt, {}, t);
    ASSERT_EQ(s.length(), c.length);
    ASSERT_EQ(s.levels(), c.levels);
    ASSERT_EQ(s.vocab(), c.vocab);
    for (double v : s.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_TRUE(std::isfinite(v));
    }
    for (std::size_t i = 0; i < c.length; ++i)
      for (std::size_t r = 0; r < c.levels; ++r) EXPECT_EQ(s.defined(i, r), xt.masked(i, r));
    EXPECT_EQ(net.forward(xt, {}, t), s);
  }
}

TEST(ScoreNetwork, NullSubstitutionIsBitExact) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(8);
  net.init_uniform(rng, -0.5, 0.5);
  const TokenGrid xt = random_grid(c, rng, 0.5);
  const ConditionBundle full = full_condition(c, rng);
  for (int mask = 0; mask < 8; ++mask) {
    const ConditionBundle cond = apply_mask(full, {bool(mask & 1), bool(mask & 2), bool(mask & 4)});
    const ConditionBundle filled = net.fill_nulls(cond);
    EXPECT_TRUE(filled.semantic && filled.global_style && filled.temporal_style);
    EXPECT_EQ(net.forward(xt, cond, 0.4), net.forward(xt, filled, 0.4)) << "mask " << mask;
  }
}

TEST(ScoreNetwork, TemporalStyleIsWindowLocalWithoutAttention) {
  ModelConfig c = small_config();
  c.attention = false;
  c.blocks = 1;
  c.length = 12;
  ScoreNetwork net(c);
  Rng rng(9);
  net.init_uniform(rng, -0.5, 0.5);
  const TokenGrid xt = random_grid(c, rng, 0.6);
  ConditionBundle a = full_condition(c, rng), b = a;
  for (std::size_t k = 0; k < c.temporal_dim; ++k) (*b.temporal_style)(1, k) += 0.7;
  const ScoreField sa = net.forward(xt, a, 0.5), sb = net.forward(xt, b, 0.5);
  for (std::size_t i = 0; i < c.length; ++i) {
    bool differs = false;
    for (std::size_t r = 0; r < c.levels; ++r)
      for (std::size_t v = 0; v < c.vocab; ++v) differs |= sa.at(i, r, v) != sb.at(i, r, v);
    EXPECT_EQ(differs, i / c.window == 1) << "frame " << i;
  }
}

TEST(ScoreNetwork, SingleWindowShape) {
  ModelConfig c = small_config();
  c.length = c.window;
  ScoreNetwork net(c);
  Rng rng(10);
  net.init(rng);
  const ScoreField s = net.forward(random_grid(c, rng, 1.0), full_condition(c, rng), 0.9);
  EXPECT_EQ(s.length(), c.window);
  EXPECT_EQ(s.values().size(), c.window * c.levels * c.vocab);
}

TEST(ScoreNetwork, StandardInitGivesUniformRatio) {
  // Zero heads leave only the time offset, so every entry is the unmasking
  // ratio (1 - m) / m.
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(11);
  net.init(rng);
  const double t = 0.3;
  const ScoreField s = net.forward(TokenGrid(c.length, c.levels, c.vocab), {}, t);
  const double m = mask_probability(c.schedule, t);
  for (double v : s.values()) EXPECT_NEAR(v, (1 - m) / m, 1e-12 * (1 - m) / m);
}

TEST(ScoreNetwork, ConditionShapeErrors) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  ConditionBundle bad;
  bad.semantic = Matrix(c.length + 1, c.semantic_dim);
  EXPECT_THROW(net.forward(TokenGrid(c.length, c.levels, c.vocab), bad, 0.5), ShapeError);
  EXPECT_THROW(net.forward(TokenGrid(c.length + 4, c.levels, c.vocab), {}, 0.5), ShapeError);
}

TEST(ScoreNetwork, NumericFaultCarriesBlockIndex) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(12);
  net.init_uniform(rng, -0.2, 0.2);
  auto& w = net.parameters()[net.index_of("block1.mlp.fc1.b")].value;
  w(0, 0) = std::numeric_limits<double>::infinity();
  const TokenGrid xt = random_grid(c, rng, 0.5);
  try {
    net.forward(xt, {}, 0.5);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_EQ(e.where(), 1);
  }
  std::vector<GradientItem> items(3);
  for (auto& it : items) {
    it.xt = xt;
    it.loss = [](const ScoreField&, std::span<double>) { return 0.0; };
  }
  Gradients g = net.zero_gradients();
  try {
    gradient(net, items, g);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_EQ(e.where(), 0);
  }
}

TEST(Gradient, QuadraticProbeEqualsTheta) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(13);
  net.init_uniform(rng, -1, 1);
  Gradients g = net.zero_gradients();
  const double loss = gradient(net, {}, g, 1.0);
  double half_sq = 0.0;
  for (std::size_t p = 0; p < g.size(); ++p) {
    EXPECT_EQ(g[p], net.parameters()[p].value);
    for (double v : net.parameters()[p].value.flat()) half_sq += 0.5 * v * v;
  }
  EXPECT_NEAR(loss, half_sq, 1e-9 * half_sq);
}

TEST(Gradient, UnusedHeadHasExactlyZeroGradient) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(14);
  net.init_uniform(rng, -0.3, 0.3);
  TokenGrid x0(c.length, 1, c.vocab);
  for (auto& t : x0.tokens()) t = static_cast<Token>(rng.below(c.vocab));
  const TokenGrid xt = corrupt(x0, 0.7, c.schedule, rng);
  std::vector<GradientItem> items(1);
  items[0].xt = xt;
  items[0].t = 0.7;
  items[0].loss = dse_against(xt, x0, 0.7, c.schedule);
  Gradients g = net.zero_gradients();
  gradient(net, items, g);
  for (double v : g[net.index_of("head1.w")].flat()) EXPECT_EQ(v, 0.0);
  for (double v : g[net.index_of("head1.b")].flat()) EXPECT_EQ(v, 0.0);
  for (double v : g[net.index_of("embed.level1")].flat()) EXPECT_EQ(v, 0.0);
  double head0 = 0.0;
  for (double v : g[net.index_of("head0.w")].flat()) head0 += std::abs(v);
  EXPECT_GT(head0, 0.0);
}

TEST(Gradient, MatchesFiniteDifferencesOnRandomCoordinates) {
  ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(15);
  net.init_uniform(rng, -0.3, 0.3);
  std::vector<GradientItem> items;
  for (int k = 0; k < 3; ++k) {
    TokenGrid x0(c.length, c.levels, c.vocab);
    for (auto& t : x0.tokens()) t = static_cast<Token>(rng.below(c.vocab));
    const double t = rng.uniform(0.2, 0.9);
    const TokenGrid xt = corrupt(x0, t, c.schedule, rng);
    ConditionBundle cond = full_condition(c, rng);
    if (k == 1) cond.global_style.reset();
    items.push_back({xt, cond, t, dse_against(xt, x0, t, c.schedule)});
  }
  Gradients g = net.zero_gradients();
  gradient(net, items, g);
  auto loss = [&] {
    Gradients scratch = net.zero_gradients();
    return gradient(net, items, scratch);
  };
  const double h = 1e-4;
  int checked = 0, failures = 0;
  // Visit every parameter tensor, then fill up with random coordinates.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < g.size(); ++p) coords.emplace_back(p, rng.below(g[p].size()));
  while (coords.size() < 240) {
    const std::size_t p = rng.below(g.size());
    coords.emplace_back(p, rng.below(g[p].size()));
  }
  for (auto [p, k] : coords) {
    double& x = net.parameters()[p].value.flat()[k];
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double dn = loss();
    x = saved;
    const double fd = (up - dn) / (2 * h);
    const double an = g[p].flat()[k];
    const bool ok = std::abs(an - fd) <= std::max(1e-7, 1e-4 * std::abs(fd));
    failures += !ok;
    ++checked;
    EXPECT_TRUE(ok) << net.parameters()[p].name << "[" << k << "] analytic " << an << " fd " << fd;
  }
  EXPECT_GE(checked, 200);
  EXPECT_EQ(failures, 0);
}

TEST(Checkpoint, RoundTripAndValidation) {
  const ModelConfig c = small_config();
  ScoreNetwork net(c);
  Rng rng(16);
  net.init_uniform(rng, -1, 1);
  std::stringstream ss;
  net.save(ss);
  const std::string bytes = ss.str();
  std::istringstream in(bytes);
  const ScoreNetwork back = ScoreNetwork::load(in, &c);
  EXPECT_TRUE(back.config() == c);
  for (std::size_t p = 0; p < net.parameters().size(); ++p)
    EXPECT_EQ(back.parameters()[p].value, net.parameters()[p].value);

  std::stringstream again;
  back.save(again);
  EXPECT_EQ(again.str(), bytes);

  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream bad_in(bad);
  EXPECT_THROW(ScoreNetwork::load(bad_in), IoError);

  std::istringstream trunc(bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(ScoreNetwork::load(trunc), IoError);

  ModelConfig other = c;
  other.width = 32;
  std::istringstream mismatch(bytes);
  EXPECT_THROW(ScoreNetwork::load(mismatch, &other), ConfigError);
}
