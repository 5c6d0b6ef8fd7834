#include "maskdiff/model.hpp"

#include <cmath>
#include <exception>
#include <fstream>

#include "maskdiff/autodiff.hpp"
#include "maskdiff/io.hpp"

namespace maskdiff {
namespace {

constexpr io::Magic kCheckpointMagic = io::make_magic("MDIFCKPT");
constexpr std::uint32_t kCheckpointVersion = 1;

// Parameters of one transformer block, in storage order.
enum BlockParam : std::size_t {
  kQw, kQb, kKw, kKb, kVw, kVb, kOw, kOb, kFc1w, kFc1b, kFc2w, kFc2b, kBlockParams
};

Matrix positional_encoding(std::size_t length, std::size_t width) {
  Matrix pe(length, width);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t c = 0; c + 1 < width + 1; c += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(c) / static_cast<double>(width));
      pe(i, c) = std::sin(static_cast<double>(i) * freq);
      if (c + 1 < width) pe(i, c + 1) = std::cos(static_cast<double>(i) * freq);
    }
  }
  return pe;
}

bool all_finite(const Matrix& m) {
  for (double v : m.flat())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model: " + msg);
  };
  need(length > 0 && levels > 0 && vocab >= 1 && width > 0, "length, levels, vocab, width must be positive");
  need(vocab < kMask, "vocab too large");
  need(window > 0 && length % window == 0, "length must be a multiple of window");
  need(heads > 0 && width % heads == 0, "width must be divisible by heads");
  need(mlp_ratio > 0, "mlp_ratio must be positive");
  need(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even and >= 2");
  need(semantic_dim > 0 && global_dim > 0 && temporal_dim > 0, "condition dims must be positive");
  need(var_floor > 0.0, "var_floor must be positive");
  schedule.validate();
}

ConditionShape ModelConfig::condition_shape() const {
  return ConditionShape{length, window, semantic_dim, global_dim, temporal_dim};
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.length == b.length && a.levels == b.levels && a.vocab == b.vocab && a.width == b.width &&
         a.semantic_dim == b.semantic_dim && a.global_dim == b.global_dim &&
         a.temporal_dim == b.temporal_dim && a.window == b.window && a.blocks == b.blocks &&
         a.heads == b.heads && a.mlp_ratio == b.mlp_ratio && a.time_dim == b.time_dim &&
         a.attention == b.attention && a.var_floor == b.var_floor &&
         a.schedule.eps == b.schedule.eps && a.schedule.kind == b.schedule.kind;
}

// ---------------------------------------------------------------------------
// Parameter layout

struct ScoreNetwork::Layout {
  std::size_t embed0, null_sem, null_global, null_temporal;
  std::size_t sem_w, sem_b, fuse_w, fuse_b;
  std::size_t chan1_w, chan1_b, chan2_w, chan2_b;
  std::size_t temp1_w, temp1_b, temp2_w, temp2_b;
  std::size_t block0, head0;

  explicit Layout(const ModelConfig& cfg) {
    std::size_t k = 0;
    embed0 = k;
    k += cfg.levels;
    null_sem = k++;
    null_global = k++;
    null_temporal = k++;
    sem_w = k++;
    sem_b = k++;
    fuse_w = k++;
    fuse_b = k++;
    chan1_w = k++;
    chan1_b = k++;
    chan2_w = k++;
    chan2_b = k++;
    temp1_w = k++;
    temp1_b = k++;
    temp2_w = k++;
    temp2_b = k++;
    block0 = k;
    k += cfg.blocks * kBlockParams;
    head0 = k;
  }
  std::size_t block(std::size_t b, BlockParam p) const { return block0 + b * kBlockParams + p; }
  std::size_t head_w(std::size_t r) const { return head0 + 2 * r; }
  std::size_t head_b(std::size_t r) const { return head0 + 2 * r + 1; }
};

void ScoreNetwork::add(std::string name, std::size_t rows, std::size_t cols) {
  params_.push_back(Parameter{std::move(name), Matrix(rows, cols)});
}

ScoreNetwork::ScoreNetwork(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t C = cfg.width, T = cfg.time_dim, hidden = cfg.mlp_ratio * cfg.width;
  // Channel modulation: six C-vectors per block, two per head.
  const std::size_t chan_out = 6 * C * cfg.blocks + 2 * C * cfg.levels;
  // Temporal modulation: two scales per block, one per head, per window.
  const std::size_t temp_out = 2 * cfg.blocks + cfg.levels;

  for (std::size_t r = 0; r < cfg.levels; ++r)
    add("embed.level" + std::to_string(r), cfg.vocab + 1, C);
  add("null.semantic", 1, cfg.semantic_dim);
  add("null.global", 1, cfg.global_dim);
  add("null.temporal", 1, cfg.temporal_dim);
  add("semantic.w", cfg.semantic_dim, C);
  add("semantic.b", 1, C);
  add("fusion.w", 2 * C, C);
  add("fusion.b", 1, C);
  add("channel_mod.fc1.w", cfg.global_dim + T, C);
  add("channel_mod.fc1.b", 1, C);
  add("channel_mod.fc2.w", C, chan_out);
  add("channel_mod.fc2.b", 1, chan_out);
  add("temporal_mod.fc1.w", cfg.temporal_dim + T, C);
  add("temporal_mod.fc1.b", 1, C);
  add("temporal_mod.fc2.w", C, temp_out);
  add("temporal_mod.fc2.b", 1, temp_out);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    add(p + "attn.q.w", C, C);
    add(p + "attn.q.b", 1, C);
    add(p + "attn.k.w", C, C);
    add(p + "attn.k.b", 1, C);
    add(p + "attn.v.w", C, C);
    add(p + "attn.v.b", 1, C);
    add(p + "attn.o.w", C, C);
    add(p + "attn.o.b", 1, C);
    add(p + "mlp.fc1.w", C, hidden);
    add(p + "mlp.fc1.b", 1, hidden);
    add(p + "mlp.fc2.w", hidden, C);
    add(p + "mlp.fc2.b", 1, C);
  }
  for (std::size_t r = 0; r < cfg.levels; ++r) {
    add("head" + std::to_string(r) + ".w", C, cfg.vocab);
    add("head" + std::to_string(r) + ".b", 1, cfg.vocab);
  }
}

void ScoreNetwork::init(Rng& rng) {
  const Layout lay(cfg_);
  for (auto& p : params_) p.value.fill(0.0);
  auto xavier = [&](std::size_t idx) {
    Matrix& m = params_[idx].value;
    const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (double& v : m.flat()) v = rng.uniform(-limit, limit);
  };
  for (std::size_t r = 0; r < cfg_.levels; ++r) {
    for (double& v : params_[lay.embed0 + r].value.flat()) v = rng.uniform(-0.1, 0.1);
  }
  xavier(lay.sem_w);
  xavier(lay.fuse_w);
  xavier(lay.chan1_w);
  xavier(lay.temp1_w);
  params_[lay.temp2_b].value.fill(1.0);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    for (BlockParam p : {kQw, kKw, kVw, kOw, kFc1w, kFc2w}) xavier(lay.block(b, p));
  }
}

void ScoreNetwork::init_uniform(Rng& rng, double lo, double hi) {
  for (auto& p : params_)
    for (double& v : p.value.flat()) v = rng.uniform(lo, hi);
}

std::size_t ScoreNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Gradients ScoreNetwork::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

std::size_t ScoreNetwork::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < params_.size(); ++k)
    if (params_[k].name == name) return k;
  throw InvalidInput("no parameter named '" + name + "'");
}

ConditionBundle ScoreNetwork::fill_nulls(const ConditionBundle& cond) const {
  const Layout lay(cfg_);
  auto repeat = [](const Matrix& row, std::size_t rows) {
    Matrix out(rows, row.cols());
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(row.data(), row.data() + row.cols(), out.row(i).data());
    return out;
  };
  ConditionBundle out = cond;
  if (!out.semantic) out.semantic = repeat(params_[lay.null_sem].value, cfg_.length);
  if (!out.global_style) out.global_style = params_[lay.null_global].value;
  if (!out.temporal_style) {
    out.temporal_style = repeat(params_[lay.null_temporal].value, cfg_.length / cfg_.window);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

Matrix time_features(const ModelConfig& cfg, double t) {
  const double sb = cumulative_noise(cfg.schedule, t);
  const std::size_t half = cfg.time_dim / 2;
  Matrix f(1, cfg.time_dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = 0.25 * std::exp2(0.5 * static_cast<double>(k));
    f(0, k) = std::sin(sb * freq);
    f(0, half + k) = std::cos(sb * freq);
  }
  return f;
}

Matrix ScoreNetwork::embed(const TokenGrid& xt) const {
  const Layout lay(cfg_);
  if (xt.length() != cfg_.length || xt.vocab() != cfg_.vocab || xt.levels() == 0 ||
      xt.levels() > cfg_.levels) {
    throw ShapeError("embed: grid shape does not match the network");
  }
  xt.validate();
  Matrix out(xt.length(), cfg_.width);
  for (std::size_t i = 0; i < xt.length(); ++i) {
    auto o = out.row(i);
    for (std::size_t r = 0; r < xt.levels(); ++r) {
      const std::size_t idx = xt.masked(i, r) ? cfg_.vocab : xt.at(i, r);
      auto src = params_[lay.embed0 + r].value.row(idx);
      for (std::size_t c = 0; c < cfg_.width; ++c) o[c] += src[c];
    }
  }
  return out;
}

double ScoreNetwork::run(const TokenGrid& xt, const ConditionBundle& cond, double t,
                         ScoreField* scores, const GradientItem* item, Gradients* grads) const {
  using Id = ad::Tape::Id;
  const Layout lay(cfg_);
  const std::size_t L = cfg_.length, C = cfg_.width, B = cfg_.blocks, n = cfg_.vocab;
  if (xt.length() != L || xt.vocab() != n || xt.levels() == 0 || xt.levels() > cfg_.levels) {
    throw ShapeError("score_forward: grid shape does not match the network");
  }
  xt.validate();
  cond.validate(cfg_.condition_shape());
  const std::size_t R = xt.levels();
  const std::size_t windows = L / cfg_.window;

  const double offset = std::log(unmask_ratio(cfg_.schedule, t));
  if (!std::isfinite(offset)) throw DomainError("score_forward: t must be positive");

  ad::Tape tape(grads != nullptr);
  auto P = [&](std::size_t idx) -> Id {
    return tape.param(params_[idx].value, grads != nullptr ? &(*grads)[idx] : nullptr);
  };

  // Token embedding and semantic fusion.
  std::vector<Id> tables;
  std::vector<std::size_t> indices(L * R);
  for (std::size_t r = 0; r < R; ++r) tables.push_back(P(lay.embed0 + r));
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t r = 0; r < R; ++r) indices[i * R + r] = xt.masked(i, r) ? n : xt.at(i, r);
  const Id masked_feat = tape.embedding_sum(tables, indices, L);

  const Id sem_in = cond.semantic ? tape.constant(*cond.semantic)
                                  : tape.broadcast_rows(P(lay.null_sem), L);
  const Id sem = tape.linear(sem_in, P(lay.sem_w), P(lay.sem_b));
  Id h = tape.linear(tape.concat_cols(masked_feat, sem), P(lay.fuse_w), P(lay.fuse_b));
  h = tape.add(h, tape.constant(positional_encoding(L, C)));

  // Modulation generators.
  const Id temb = tape.constant(time_features(cfg_, t));
  const Id glob = cond.global_style ? tape.constant(*cond.global_style) : P(lay.null_global);
  Id chan = tape.linear(tape.concat_cols(glob, temb), P(lay.chan1_w), P(lay.chan1_b));
  chan = tape.linear(tape.silu(chan), P(lay.chan2_w), P(lay.chan2_b));

  const Id temp_style = cond.temporal_style ? tape.constant(*cond.temporal_style)
                                            : tape.broadcast_rows(P(lay.null_temporal), windows);
  Id temp = tape.linear(tape.concat_cols(temp_style, tape.broadcast_rows(temb, windows)),
                        P(lay.temp1_w), P(lay.temp1_b));
  temp = tape.linear(tape.silu(temp), P(lay.temp2_w), P(lay.temp2_b));

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t off = 6 * C * b;
    const Id alpha1 = tape.slice_cols(chan, off, C);
    const Id gamma1 = tape.slice_cols(chan, off + C, C);
    const Id beta1 = tape.slice_cols(chan, off + 2 * C, C);
    const Id alpha2 = tape.slice_cols(chan, off + 3 * C, C);
    const Id gamma2 = tape.slice_cols(chan, off + 4 * C, C);
    const Id beta2 = tape.slice_cols(chan, off + 5 * C, C);
    const Id te1 = tape.slice_cols(temp, 2 * b, 1);
    const Id te2 = tape.slice_cols(temp, 2 * b + 1, 1);

    if (cfg_.attention) {
      const Id x = tape.dual_ada_ln(h, gamma1, beta1, te1, cfg_.window, cfg_.var_floor);
      const Id q = tape.linear(x, P(lay.block(b, kQw)), P(lay.block(b, kQb)));
      const Id k = tape.linear(x, P(lay.block(b, kKw)), P(lay.block(b, kKb)));
      const Id v = tape.linear(x, P(lay.block(b, kVw)), P(lay.block(b, kVb)));
      const Id att = tape.linear(tape.attention(q, k, v, cfg_.heads), P(lay.block(b, kOw)),
                                 P(lay.block(b, kOb)));
      h = tape.gated_residual(h, att, alpha1);
    }
    const Id x = tape.dual_ada_ln(h, gamma2, beta2, te2, cfg_.window, cfg_.var_floor);
    Id mlp = tape.gelu(tape.linear(x, P(lay.block(b, kFc1w)), P(lay.block(b, kFc1b))));
    mlp = tape.linear(mlp, P(lay.block(b, kFc2w)), P(lay.block(b, kFc2b)));
    h = tape.gated_residual(h, mlp, alpha2);
    if (!all_finite(tape.value(h))) {
      throw NumericFault("score_forward: non-finite activation in block " + std::to_string(b),
                         static_cast<int>(b));
    }
  }

  std::vector<Id> logits(R);
  const std::size_t head_off = 6 * C * B;
  for (std::size_t r = 0; r < R; ++r) {
    const Id gamma = tape.slice_cols(chan, head_off + 2 * C * r, C);
    const Id beta = tape.slice_cols(chan, head_off + 2 * C * r + C, C);
    const Id te = tape.slice_cols(temp, 2 * B + r, 1);
    const Id x = tape.dual_ada_ln(h, gamma, beta, te, cfg_.window, cfg_.var_floor);
    logits[r] = tape.linear(x, P(lay.head_w(r)), P(lay.head_b(r)));
  }

  ScoreField field(L, R, n);
  for (std::size_t r = 0; r < R; ++r) {
    const Matrix& lg = tape.value(logits[r]);
    for (std::size_t i = 0; i < L; ++i) {
      field.set_defined(i, r, xt.masked(i, r));
      for (std::size_t v = 0; v < n; ++v) {
        const double s = std::exp(lg(i, v) + offset);
        if (!std::isfinite(s)) {
          throw NumericFault("score_forward: non-finite score in output heads",
                             static_cast<int>(B));
        }
        field.at(i, r, v) = s;
      }
    }
  }

  double loss = 0.0;
  if (item != nullptr) {
    std::vector<double> dlog(field.values().size(), 0.0);
    loss = item->loss(field, dlog);
    if (!std::isfinite(loss)) throw NumericFault("gradient: non-finite loss", -1);
    for (std::size_t r = 0; r < R; ++r) {
      Matrix g(L, n);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t v = 0; v < n; ++v) g(i, v) = dlog[(i * R + r) * n + v];
      tape.seed(logits[r], g);
    }
    tape.backward();
  }
  if (scores != nullptr) *scores = std::move(field);
  return loss;
}

ScoreField ScoreNetwork::forward(const TokenGrid& xt, const ConditionBundle& cond, double t) const {
  ScoreField out;
  run(xt, cond, t, &out, nullptr, nullptr);
  return out;
}

double ScoreNetwork::accumulate_gradient(const GradientItem& item, Gradients& grads) const {
  if (grads.size() != params_.size()) throw ShapeError("accumulate_gradient: gradient count mismatch");
  return run(item.xt, item.cond, item.t, nullptr, &item, &grads);
}

double gradient(const ScoreNetwork& net, std::span<const GradientItem> items, Gradients& out,
                double l2) {
  out = net.zero_gradients();
  // Fixed-size groups summed in order: independent of the OpenMP team size.
  constexpr std::size_t kGroup = 4;
  const std::size_t groups = (items.size() + kGroup - 1) / kGroup;
  std::vector<Gradients> partial(groups);
  std::vector<double> losses(items.size(), 0.0);
  std::vector<std::exception_ptr> errors(groups);
  const std::int64_t ng = static_cast<std::int64_t>(groups);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t g = 0; g < ng; ++g) {
    try {
      partial[g] = net.zero_gradients();
      const std::size_t end = std::min(items.size(), (g + 1) * kGroup);
      for (std::size_t k = g * kGroup; k < end; ++k) {
        try {
          losses[k] = net.accumulate_gradient(items[k], partial[g]);
        } catch (const NumericFault& e) {
          throw NumericFault(std::string(e.what()) + " (batch item " + std::to_string(k) + ")",
                             static_cast<int>(k));
        }
      }
    } catch (...) {
      errors[g] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  double total = 0.0;
  for (double l : losses) total += l;
  for (const auto& part : partial) {
    for (std::size_t p = 0; p < out.size(); ++p) {
      double* d = out[p].data();
      const double* s = part[p].data();
      for (std::size_t k = 0; k < out[p].size(); ++k) d[k] += s[k];
    }
  }
  if (l2 != 0.0) {
    auto params = net.parameters();
    for (std::size_t p = 0; p < out.size(); ++p) {
      const double* v = params[p].value.data();
      double* d = out[p].data();
      double sq = 0.0;
      for (std::size_t k = 0; k < out[p].size(); ++k) {
        d[k] += l2 * v[k];
        sq += v[k] * v[k];
      }
      total += 0.5 * l2 * sq;
    }
  }
  for (const auto& g : out) {
    if (!all_finite(g)) throw NumericFault("gradient: non-finite gradient", -1);
  }
  return total;
}

Matrix dual_ada_ln(const Matrix& h, std::span<const double> gamma_ch,
                   std::span<const double> beta_ch, std::span<const double> gamma_te,
                   std::size_t window, double var_floor) {
  ad::Tape tape(false);
  auto row = [](std::span<const double> s) {
    Matrix m(1, s.size());
    std::copy(s.begin(), s.end(), m.data());
    return m;
  };
  Matrix te(gamma_te.size(), 1);
  std::copy(gamma_te.begin(), gamma_te.end(), te.data());
  const auto id = tape.dual_ada_ln(tape.constant(h), tape.constant(row(gamma_ch)),
                                   tape.constant(row(beta_ch)), tape.constant(std::move(te)),
                                   window, var_floor);
  return tape.value(id);
}

ScoreFn as_score_fn(const ScoreNetwork& net) {
  return [&net](const TokenGrid& xt, const ConditionBundle& cond, double t) {
    return net.forward(xt, cond, t);
  };
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   magic "MDIFCKPT", u32 version
//   u32 x 13: length levels vocab width semantic_dim global_dim temporal_dim
//             window blocks heads mlp_ratio time_dim attention
//   f64 var_floor, u32 schedule kind, f64 schedule eps
//   u64 tensor count, then per tensor in construction order:
//     u32 rows, u32 cols, rows*cols f64 (row-major)

void ScoreNetwork::save(std::ostream& out) const {
  io::Writer w(out);
  w.header(kCheckpointMagic, kCheckpointVersion);
  for (std::size_t v : {cfg_.length, cfg_.levels, cfg_.vocab, cfg_.width, cfg_.semantic_dim,
                        cfg_.global_dim, cfg_.temporal_dim, cfg_.window, cfg_.blocks, cfg_.heads,
                        cfg_.mlp_ratio, cfg_.time_dim}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(cfg_.attention ? 1 : 0);
  w.f64(cfg_.var_floor);
  w.u32(static_cast<std::uint32_t>(cfg_.schedule.kind));
  w.f64(cfg_.schedule.eps);
  w.u64(params_.size());
  for (const auto& p : params_) {
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    for (double v : p.value.flat()) w.f64(v);
  }
  w.check();
}

void ScoreNetwork::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save(out);
}

ScoreNetwork ScoreNetwork::load(std::istream& in, const ModelConfig* expected) {
  io::Reader r(in, "checkpoint");
  const std::uint32_t version = r.header(kCheckpointMagic);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig cfg;
  for (std::size_t* f : {&cfg.length, &cfg.levels, &cfg.vocab, &cfg.width, &cfg.semantic_dim,
                         &cfg.global_dim, &cfg.temporal_dim, &cfg.window, &cfg.blocks,
                         &cfg.heads, &cfg.mlp_ratio, &cfg.time_dim}) {
    *f = r.u32();
  }
  cfg.attention = r.u32() != 0;
  cfg.var_floor = r.f64();
  const std::uint32_t kind = r.u32();
  if (kind != static_cast<std::uint32_t>(ScheduleKind::LogLinear)) {
    throw IoError("checkpoint: unknown schedule kind");
  }
  cfg.schedule.kind = ScheduleKind::LogLinear;
  cfg.schedule.eps = r.f64();
  if (expected != nullptr && !(*expected == cfg)) {
    throw ConfigError("checkpoint shape does not match the configured model");
  }
  ScoreNetwork net(cfg);
  if (r.u64() != net.params_.size()) throw IoError("checkpoint: tensor count mismatch");
  for (auto& p : net.params_) {
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows != p.value.rows() || cols != p.value.cols()) {
      throw IoError("checkpoint: shape mismatch for " + p.name);
    }
    for (double& v : p.value.flat()) v = r.f64();
  }
  r.expect_end();
  return net;
}

ScoreNetwork ScoreNetwork::load(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path.string());
  return load(in, expected);
}

}  // namespace maskdiff
