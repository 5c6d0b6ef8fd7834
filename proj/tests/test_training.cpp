#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "maskdiff/training.hpp"

using namespace maskdiff;
using namespace maskdiff::train;

namespace {

ModelConfig tiny(std::size_t length, std::size_t levels, std::size_t vocab) {
  ModelConfig c;
  c.length = length;
  c.levels = levels;
  c.vocab = vocab;
  c.width = 16;
  c.semantic_dim = 2;
  c.global_dim = 2;
  c.temporal_dim = 2;
  c.window = length % 4 == 0 ? 4 : 1;
  c.blocks = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.time_dim = 8;
  return c;
}

std::vector<Example> random_examples(const ModelConfig& c, std::size_t count, Rng& rng) {
  std::vector<Example> out;
  for (std::size_t k = 0; k < count; ++k) {
    Example e;
    e.grid = TokenGrid(c.length, c.levels, c.vocab);
    for (auto& t : e.grid.tokens()) t = static_cast<Token>(rng.below(c.vocab));
    e.cond.semantic = Matrix(c.length, c.semantic_dim, rng.uniform());
    e.cond.global_style = Matrix(1, c.global_dim, rng.uniform());
    e.cond.temporal_style = Matrix(c.length / c.window, c.temporal_dim, rng.uniform());
    out.push_back(e);
  }
  return out;
}

std::string checkpoint_bytes(const ScoreNetwork& net) {
  std::ostringstream os;
  net.save(os);
  return os.str();
}

}  // namespace

TEST(Dropout, MarginalRatesMatchConfiguration) {
  TrainConfig cfg;
  Rng rng(1);
  const int draws = 10000;
  int sem = 0, glob = 0, temp = 0, all = 0;
  for (int k = 0; k < draws; ++k) {
    const ConditionMask m = draw_dropout(cfg, rng);
    sem += !m.semantic;
    glob += !m.global_style;
    temp += !m.temporal_style;
    all += !m.semantic && !m.global_style && !m.temporal_style;
  }
  const double marginal = cfg.marginal_null_rate();
  EXPECT_NEAR(marginal, 0.19, 1e-15);
  EXPECT_NEAR(sem / double(draws), marginal, 0.01);
  EXPECT_NEAR(glob / double(draws), marginal, 0.01);
  EXPECT_NEAR(temp / double(draws), marginal, 0.01);
  // All three null: the all-null event plus three independent slot drops.
  EXPECT_NEAR(all / double(draws), 0.1 + 0.9 * 1e-3, 0.01);
}

TEST(Curriculum, DefaultStages) {
  const auto s = default_curriculum(900, 4);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], (CurriculumStage{0, 1}));
  EXPECT_EQ(s[1], (CurriculumStage{300, 2}));
  EXPECT_EQ(s[2], (CurriculumStage{600, 4}));
  const auto one = default_curriculum(900, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (CurriculumStage{0, 1}));
  TrainConfig cfg;
  cfg.steps = 900;
  EXPECT_EQ(cfg.levels_at(0, 4), 1u);
  EXPECT_EQ(cfg.levels_at(299, 4), 1u);
  EXPECT_EQ(cfg.levels_at(300, 4), 2u);
  EXPECT_EQ(cfg.levels_at(899, 4), 4u);
}

TEST(TrainConfig, ValidationErrors) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = {};
  cfg.slot_dropout = 1.5;
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = {};
  cfg.curriculum = {{0, 3}};
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = {};
  cfg.curriculum = {{5, 1}};
  EXPECT_THROW(cfg.validate(2), ConfigError);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitIdentical) {
  const ModelConfig c = tiny(4, 2, 4);
  ScoreNetwork net(c);
  Rng rng(2);
  net.init_uniform(rng, -0.2, 0.2);
  const auto data = random_examples(c, 8, rng);
  const std::string before = checkpoint_bytes(net);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 8;
  AdamW opt(net);
  const double loss = train_step(net, opt, data, cfg, 0);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  EXPECT_EQ(opt.step_count(), 1u);
  EXPECT_EQ(checkpoint_bytes(net), before);
}

TEST(TrainStep, SingleLevelStageNeverTouchesDeeperHeads) {
  const ModelConfig c = tiny(4, 3, 4);
  ScoreNetwork net(c);
  Rng rng(3);
  net.init_uniform(rng, -0.2, 0.2);
  const auto data = random_examples(c, 16, rng);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 16;
  cfg.steps = 5;
  cfg.curriculum = {{0, 1}};
  const Matrix h1 = net.parameters()[net.index_of("head1.w")].value;
  const Matrix h2 = net.parameters()[net.index_of("head2.w")].value;
  const Matrix h0 = net.parameters()[net.index_of("head0.w")].value;
  AdamW opt(net);
  for (std::size_t s = 0; s < 5; ++s) train_step(net, opt, data, cfg, s);
  EXPECT_EQ(net.parameters()[net.index_of("head1.w")].value, h1);
  EXPECT_EQ(net.parameters()[net.index_of("head2.w")].value, h2);
  EXPECT_NE(net.parameters()[net.index_of("head0.w")].value, h0);
}

TEST(TrainStep, ReportedLossIsBatchLossOfTheNetwork) {
  const ModelConfig c = tiny(4, 2, 4);
  ScoreNetwork net(c);
  Rng rng(4);
  net.init_uniform(rng, -0.2, 0.2);
  const auto data = random_examples(c, 6, rng);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.seed = 77;
  const auto items = prepare_batch(data, cfg, 7, c.levels, c.schedule);
  const double expected = batch_loss(as_score_fn(net), items, c.schedule);
  AdamW opt(net);
  EXPECT_NEAR(train_step(net, opt, data, cfg, 7), expected, 1e-12 * expected);
}

TEST(TrainStep, OracleScoreGivesZeroLoss) {
  // Single-sequence dataset: the exact score of the data is the point-mass
  // score, and feeding it through the same loss path yields zero.
  const ModelConfig c = tiny(4, 1, 3);
  Rng rng(5);
  auto data = random_examples(c, 1, rng);
  const DataDistribution dist = DataDistribution::point_mass(data[0].grid);
  const ScoreFn oracle = [&](const TokenGrid& xt, const ConditionBundle&, double t) {
    return exact_concrete_score(xt, t, dist, c.schedule);
  };
  TrainConfig cfg;
  cfg.seed = 9;
  const std::vector<Example> batch(32, data[0]);
  for (std::size_t step : {0u, 1u, 50u}) {
    const auto items = prepare_batch(batch, cfg, step, c.levels, c.schedule);
    EXPECT_LT(batch_loss(oracle, items, c.schedule), 1e-8);
  }
}

TEST(TrainStep, PreparedItemsAreDeterministicAndConsistent) {
  const ModelConfig c = tiny(4, 2, 4);
  Rng rng(6);
  const auto data = random_examples(c, 8, rng);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.seed = 3;
  const auto a = prepare_batch(data, cfg, 2, c.levels, c.schedule);
  const auto b = prepare_batch(data, cfg, 2, c.levels, c.schedule);
  ASSERT_EQ(a.size(), data.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].xt, b[k].xt);
    EXPECT_EQ(a[k].t, b[k].t);
    EXPECT_EQ(a[k].cond, b[k].cond);
    EXPECT_EQ(a[k].x0.levels(), 1u);  // first curriculum stage
    EXPECT_GE(a[k].t, cfg.t_min);
    EXPECT_LE(a[k].t, 1.0);
    for (std::size_t c2 = 0; c2 < a[k].xt.cells(); ++c2) {
      if (a[k].xt.tokens()[c2] != kMask) {
        EXPECT_EQ(a[k].xt.tokens()[c2], a[k].x0.tokens()[c2]);
      }
    }
  }
}

TEST(TrainStep, NumericFaultNamesTheBatchItemAndKeepsParameters) {
  const ModelConfig c = tiny(4, 1, 4);
  ScoreNetwork net(c);
  Rng rng(7);
  net.init_uniform(rng, -0.2, 0.2);
  auto data = random_examples(c, 5, rng);
  (*data[3].cond.semantic)(1, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.slot_dropout = 0.0;
  cfg.all_null = 0.0;
  const std::string before = checkpoint_bytes(net);
  AdamW opt(net);
  try {
    train_step(net, opt, data, cfg, 0);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_EQ(e.where(), 3);
  }
  EXPECT_EQ(checkpoint_bytes(net), before);
}

TEST(Fit, IsDeterministic) {
  const ModelConfig c = tiny(4, 2, 4);
  Rng rng(8);
  const auto data = random_examples(c, 20, rng);
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = 1234;
  auto run = [&] {
    ScoreNetwork net(c);
    Rng init(5);
    net.init(init);
    std::vector<double> losses;
    fit(net, data, cfg, [&](const LogRecord& r, const ScoreNetwork&) { losses.push_back(r.loss); });
    return std::pair{checkpoint_bytes(net), losses};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.second.size(), 12u);
}

TEST(Fit, LearnsSingleSequence) {
  ModelConfig c = tiny(2, 1, 2);
  c.window = 1;
  ScoreNetwork net(c);
  Rng rng(9);
  net.init(rng);
  Example ex;
  ex.grid = TokenGrid(2, 1, 2);
  ex.grid.at(0, 0) = 1;
  ex.grid.at(1, 0) = 0;
  const std::vector<Example> data(1, ex);
  const std::vector<Example> held(256, ex);
  const double before = heldout_dse(net, held, 1e-3, 42);
  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 10;
  fit(net, data, cfg);
  const double after = heldout_dse(net, held, 1e-3, 42);
  EXPECT_GT(before, 0.5);
  EXPECT_LT(after, 0.05);
}

TEST(LogRecord, JsonLine) {
  std::ostringstream os;
  write_jsonl({3, 1.5, 2, 0.25}, os);
  EXPECT_EQ(os.str(), "{\"levels\":2,\"loss\":1.5,\"step\":3,\"wall_seconds\":0.25}\n");
}

TEST(DetectorLoss, Examples) {
  const std::vector<std::vector<double>> e = {{1, 0}, {0, 2}, {3, 4}};
  const std::vector<std::vector<double>> orth = {{0, 1}, {-2, 0}, {-4, 3}};
  const std::vector<double> half(3, 0.5);
  EXPECT_NEAR(detector_loss(half, e, e), std::log(2.0), 1e-12);
  EXPECT_NEAR(detector_loss(half, e, orth), std::log(2.0), 1e-12);
  const std::vector<double> ones(3, 1.0), zeros(3, 0.0);
  EXPECT_LE(detector_loss(ones, e, e), 1e-6);
  EXPECT_LE(detector_loss(zeros, e, orth), 1e-6);
  EXPECT_GT(detector_loss(zeros, e, e), 10.0);
  const std::vector<std::vector<double>> with_zero = {{1, 0}, {0, 0}, {3, 4}};
  try {
    detector_loss(half, with_zero, e);
    FAIL();
  } catch (const InvalidInput& err) {
    EXPECT_NE(std::string(err.what()).find("index 1"), std::string::npos);
  }
}

TEST(StyleAlignment, Examples) {
  const std::vector<double> a = {0.3, -1.2, 2.0};
  EXPECT_NEAR(style_alignment_loss(a, a), 0.0, 1e-15);
  const std::vector<double> x = {1, 0}, y = {0, 1};
  EXPECT_NEAR(style_alignment_loss(x, y), 3.0, 1e-12);
  const std::vector<double> p = {0.5, 1.0, -0.2}, q = {1.5, -0.3, 0.4};
  std::vector<double> p2 = p, q2 = q;
  for (double& v : p2) v *= 2;
  for (double& v : q2) v *= 2;
  const double base = style_alignment_loss(p, q), scaled = style_alignment_loss(p2, q2);
  // 1 - cos is unchanged; the two distance terms double.
  double cos = 0, np = 0, nq = 0;
  for (int k = 0; k < 3; ++k) {
    cos += p[k] * q[k];
    np += p[k] * p[k];
    nq += q[k] * q[k];
  }
  const double c = 1.0 - cos / std::sqrt(np * nq);
  EXPECT_NEAR(scaled - c, 2.0 * (base - c), 1e-12);
}

TEST(TemporalSmooth, Examples) {
  Matrix two(2, 1);
  two(0, 0) = 1.0;
  two(1, 0) = 3.0;
  EXPECT_EQ(temporal_smooth(two, 2)(0, 0), 2.0);
  Matrix k(6, 3, 0.7);
  const Matrix s = temporal_smooth(k, 3);
  ASSERT_EQ(s.rows(), 2u);
  for (double v : s.flat()) EXPECT_NEAR(v, 0.7, 1e-15);
  Rng rng(11);
  Matrix r(5, 2);
  for (double& v : r.flat()) v = rng.uniform();
  EXPECT_EQ(temporal_smooth(r, 1), r);
  EXPECT_THROW(temporal_smooth(r, 2), ShapeError);
}
