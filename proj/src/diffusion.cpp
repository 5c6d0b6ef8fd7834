#include "maskdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <ostream>

namespace maskdiff {

// ---------------------------------------------------------------------------
// Containers

TokenGrid::TokenGrid(std::size_t length, std::size_t levels, std::size_t vocab, Token fill)
    : length_(length), levels_(levels), vocab_(vocab), tokens_(length * levels, fill) {
  if (vocab == 0 || vocab >= kMask) throw InvalidInput("TokenGrid: vocab must lie in [1, 65534]");
}

std::size_t TokenGrid::masked_count() const {
  return static_cast<std::size_t>(std::count(tokens_.begin(), tokens_.end(), kMask));
}

TokenGrid TokenGrid::truncated(std::size_t levels) const {
  if (levels == 0 || levels > levels_) throw InvalidInput("TokenGrid::truncated: bad level count");
  TokenGrid out(length_, levels, vocab_);
  for (std::size_t i = 0; i < length_; ++i)
    for (std::size_t r = 0; r < levels; ++r) out.at(i, r) = at(i, r);
  return out;
}

void TokenGrid::validate() const {
  for (Token tok : tokens_) {
    if (tok != kMask && tok >= vocab_) {
      throw InvalidInput("TokenGrid: token " + std::to_string(tok) + " outside vocab " +
                         std::to_string(vocab_));
    }
  }
}

ScoreField::ScoreField(std::size_t length, std::size_t levels, std::size_t vocab)
    : length_(length),
      levels_(levels),
      vocab_(vocab),
      values_(length * levels * vocab, 0.0),
      defined_(length * levels, 0) {}

void DataDistribution::validate() const {
  if (support.empty()) throw InvalidInput("DataDistribution: empty support");
  const TokenGrid& first = support.front().first;
  double total = 0.0;
  for (const auto& [grid, p] : support) {
    if (grid.length() != first.length() || grid.levels() != first.levels() ||
        grid.vocab() != first.vocab()) {
      throw InvalidInput("DataDistribution: support grids differ in shape");
    }
    if (grid.has_mask()) throw InvalidInput("DataDistribution: support grid contains MASK");
    if (!(p >= 0.0)) throw InvalidInput("DataDistribution: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw InvalidInput("DataDistribution: probabilities sum to " + std::to_string(total));
  }
}

DataDistribution DataDistribution::point_mass(const TokenGrid& x0) {
  return DataDistribution{{{x0, 1.0}}};
}

// ---------------------------------------------------------------------------
// Forward process

TokenGrid corrupt(const TokenGrid& x0, double t, const NoiseSchedule& sched, Rng& rng) {
  x0.validate();
  if (x0.has_mask()) throw InvalidInput("corrupt: clean grid contains MASK");
  const double p = mask_probability(sched, t);
  TokenGrid xt = x0;
  for (Token& tok : xt.tokens()) {
    if (rng.uniform() < p) tok = kMask;
  }
  return xt;
}

double unmask_ratio(const NoiseSchedule& sched, double t) {
  const double sb = cumulative_noise(sched, t);
  if (sb == 0.0) return INFINITY;
  return 1.0 / std::expm1(sb);
}

ScoreField exact_concrete_score(const TokenGrid& xt, double t, const DataDistribution& dist,
                                const NoiseSchedule& sched) {
  dist.validate();
  const TokenGrid& ref = dist.support.front().first;
  if (ref.length() != xt.length() || ref.levels() != xt.levels() || ref.vocab() != xt.vocab()) {
    throw ShapeError("exact_concrete_score: distribution shape differs from xt");
  }
  xt.validate();
  const std::size_t L = xt.length(), R = xt.levels(), n = xt.vocab();
  const double keep = std::exp(-cumulative_noise(sched, t));
  const double drop = -std::expm1(-cumulative_noise(sched, t));

  // p(xt | x0) factorizes as drop^{#masked} * keep^{#unmasked} for every x0
  // agreeing with xt on its unmasked cells, and 0 otherwise. The common factor
  // cancels in every ratio, leaving posterior weights over compatible x0.
  const std::size_t n_masked = xt.masked_count();
  const std::size_t n_kept = xt.cells() - n_masked;
  if ((n_masked > 0 && drop == 0.0) || (n_kept > 0 && keep == 0.0)) {
    throw UnreachableState("exact_concrete_score: p_t(xt) = 0 at t=" + std::to_string(t));
  }

  ScoreField out(L, R, n);
  double z = 0.0;
  for (const auto& [x0, p] : dist.support) {
    bool compatible = p > 0.0;
    for (std::size_t c = 0; compatible && c < xt.cells(); ++c) {
      const Token tok = xt.tokens()[c];
      if (tok != kMask && tok != x0.tokens()[c]) compatible = false;
    }
    if (!compatible) continue;
    z += p;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t r = 0; r < R; ++r)
        if (xt.masked(i, r)) out.at(i, r, x0.at(i, r)) += p;
  }
  if (z == 0.0) throw UnreachableState("exact_concrete_score: p_t(xt) = 0 (no compatible x0)");

  // Unmasking one cell swaps one factor drop for keep.
  const double ratio = keep / drop;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t r = 0; r < R; ++r) {
      if (!xt.masked(i, r)) continue;
      out.set_defined(i, r, true);
      for (double& s : out.cell(i, r)) s = ratio * (s / z);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoising score entropy

namespace {

void check_corruption_pair(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0) {
  if (xt.length() != x0.length() || xt.levels() != x0.levels() || xt.vocab() != x0.vocab()) {
    throw ShapeError("dse_loss: xt and x0 shapes differ");
  }
  if (scores.length() != xt.length() || scores.levels() != xt.levels() ||
      scores.vocab() != xt.vocab()) {
    throw ShapeError("dse_loss: score field shape differs from xt");
  }
  if (x0.has_mask()) throw InvalidInput("dse_loss: x0 contains MASK");
  for (std::size_t c = 0; c < xt.cells(); ++c) {
    const Token tok = xt.tokens()[c];
    if (tok != kMask && tok != x0.tokens()[c]) {
      throw InvalidInput("dse_loss: xt is not a corruption of x0");
    }
  }
}

double dse_impl(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0, double t,
                const NoiseSchedule& sched, double* dlog) {
  check_corruption_pair(scores, xt, x0);
  const std::size_t n_masked = xt.masked_count();
  if (n_masked == 0) return 0.0;
  const double weight = instantaneous_noise(sched, t);
  const double target = unmask_ratio(sched, t);
  if (!std::isfinite(target)) throw DomainError("dse_loss: masked cells at t=0");
  const double normalizer = target * std::log(target) - target;
  const std::size_t n = xt.vocab();

  double total = 0.0;
  for (std::size_t i = 0; i < xt.length(); ++i) {
    for (std::size_t r = 0; r < xt.levels(); ++r) {
      if (!xt.masked(i, r)) continue;
      const Token clean = x0.at(i, r);
      auto cell = scores.cell(i, r);
      double acc = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        const double s = cell[v];
        if (v == clean) {
          if (!(s > 0.0)) {
            throw LossDomainError("dse_loss: nonpositive score where the target is positive");
          }
          acc += (s - target * std::log(s)) + normalizer;
        } else {
          acc += s;
        }
        if (dlog != nullptr) {
          const double c = v == clean ? target : 0.0;
          dlog[(i * xt.levels() + r) * n + v] = weight * (s - c);
        }
      }
      total += acc;
    }
  }
  return weight * total;
}

}  // namespace

double dse_loss(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0, double t,
                const NoiseSchedule& sched) {
  return dse_impl(scores, xt, x0, t, sched, nullptr);
}

double dse_loss_with_grad(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0,
                          double t, const NoiseSchedule& sched, std::span<double> dlog_scores) {
  if (dlog_scores.size() != scores.values().size()) {
    throw ShapeError("dse_loss_with_grad: gradient buffer size mismatch");
  }
  std::fill(dlog_scores.begin(), dlog_scores.end(), 0.0);
  return dse_impl(scores, xt, x0, t, sched, dlog_scores.data());
}

// ---------------------------------------------------------------------------
// Reverse process

void SamplerDiagnostics::write_jsonl(std::ostream& out) const {
  for (std::size_t k = 0; k < steps.size(); ++k) {
    out << "{\"step\":" << k << ",\"t\":" << steps[k].t << ",\"unmasked\":" << steps[k].unmasked
        << ",\"renormalized\":" << steps[k].renormalized << "}\n";
  }
  out << "{\"forced_unmask\":" << forced_unmask << ",\"clamp_events\":" << clamp_events << "}\n";
}

TokenGrid euler_step(const TokenGrid& xt, const ScoreField& scores, double t, double dt,
                     const NoiseSchedule& sched, Rng& rng, SamplerDiagnostics* diag) {
  if (!(dt > 0.0)) throw DomainError("euler_step: dt must be positive");
  if (dt > t * (1.0 + 1e-12)) throw DomainError("euler_step: dt exceeds t");
  if (scores.length() != xt.length() || scores.levels() != xt.levels() ||
      scores.vocab() != xt.vocab()) {
    throw ShapeError("euler_step: score field shape differs from xt");
  }
  const double rate = instantaneous_noise(sched, t) * dt;
  const std::size_t n = xt.vocab();
  TokenGrid next = xt;
  SamplerDiagnostics::Step rec{t, 0, 0};
  std::vector<double> jump(n);
  for (std::size_t i = 0; i < xt.length(); ++i) {
    for (std::size_t r = 0; r < xt.levels(); ++r) {
      if (!xt.masked(i, r)) continue;
      auto cell = scores.cell(i, r);
      double total = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        const double s = cell[v];
        if (!(s >= 0.0) || !std::isfinite(s)) {
          throw NumericFault("euler_step: invalid score " + std::to_string(s), -1);
        }
        jump[v] = rate * s;
        total += jump[v];
      }
      // Jump mass above 1 is a step-size artifact; renormalize jointly.
      double scale = 1.0;
      if (total > 1.0) {
        scale = 1.0 / total;
        ++rec.renormalized;
      }
      const double u = rng.uniform();
      double acc = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        acc += jump[v] * scale;
        if (u < acc) {
          next.at(i, r) = static_cast<Token>(v);
          ++rec.unmasked;
          break;
        }
      }
    }
  }
  if (diag != nullptr) diag->steps.push_back(rec);
  return next;
}

namespace {

TokenGrid run_reverse(const ScoreFn& score_fn, const ConditionBundle& cond, TokenGrid xt,
                      double t_start, std::size_t steps, const NoiseSchedule& sched, Rng& rng,
                      SamplerDiagnostics* diag) {
  if (steps == 0) throw DomainError("sample: steps must be at least 1");
  const double dt = t_start / static_cast<double>(steps);
  ScoreField last;
  for (std::size_t k = 0; k < steps && xt.has_mask(); ++k) {
    const double t = t_start * (1.0 - static_cast<double>(k) / static_cast<double>(steps));
    last = score_fn(xt, cond, t);
    xt = euler_step(xt, last, t, std::min(dt, t), sched, rng, diag);
  }
  if (xt.has_mask()) {
    for (std::size_t i = 0; i < xt.length(); ++i) {
      for (std::size_t r = 0; r < xt.levels(); ++r) {
        if (!xt.masked(i, r)) continue;
        auto cell = last.cell(i, r);
        const auto best = std::max_element(cell.begin(), cell.end()) - cell.begin();
        xt.at(i, r) = static_cast<Token>(best);
        if (diag != nullptr) ++diag->forced_unmask;
      }
    }
  }
  return xt;
}

}  // namespace

TokenGrid sample(const ScoreFn& score_fn, const ConditionBundle& cond, GridShape shape,
                 std::size_t steps, const NoiseSchedule& sched, Rng& rng,
                 SamplerDiagnostics* diag) {
  TokenGrid xt(shape.length, shape.levels, shape.vocab, kMask);
  return run_reverse(score_fn, cond, std::move(xt), 1.0, steps, sched, rng, diag);
}

TokenGrid sample_from(const ScoreFn& score_fn, const ConditionBundle& cond, TokenGrid xt,
                      double t_start, std::size_t steps, const NoiseSchedule& sched, Rng& rng,
                      SamplerDiagnostics* diag) {
  if (!(t_start > 0.0 && t_start <= 1.0)) throw DomainError("sample_from: t_start outside (0, 1]");
  xt.validate();
  return run_reverse(score_fn, cond, std::move(xt), t_start, steps, sched, rng, diag);
}

std::vector<TokenGrid> sample_batch(const ScoreFn& score_fn,
                                    const std::vector<ConditionBundle>& conds, GridShape shape,
                                    std::size_t steps, const NoiseSchedule& sched,
                                    std::uint64_t seed) {
  const std::int64_t count = static_cast<std::int64_t>(conds.size());
  std::vector<TokenGrid> out(conds.size());
  std::vector<std::exception_ptr> errors(conds.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t k = 0; k < count; ++k) {
    try {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
      out[k] = sample(score_fn, conds[k], shape, steps, sched, rng);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Guidance

ScoreField guided_score(const ScoreField& uncond,
                        const std::vector<std::pair<ScoreField, double>>& conditioned,
                        SamplerDiagnostics* diag) {
  double uncond_exponent = 1.0;
  std::vector<std::pair<const ScoreField*, double>> factors;
  for (const auto& [field, w] : conditioned) {
    if (!field.same_shape(uncond)) throw ShapeError("guided_score: score field shapes differ");
    uncond_exponent -= w;
    if (w != 0.0) factors.emplace_back(&field, w);
  }
  if (uncond_exponent != 0.0) factors.emplace_back(&uncond, uncond_exponent);

  ScoreField out = uncond;
  if (factors.empty()) {
    std::fill(out.values().begin(), out.values().end(), 1.0);
    return out;
  }
  if (factors.size() == 1 && factors.front().second == 1.0) {
    out = *factors.front().first;
    return out;
  }
  auto dst = out.values();
  for (std::size_t k = 0; k < dst.size(); ++k) {
    double log_s = 0.0;
    for (const auto& [field, w] : factors) {
      double s = field->values()[k];
      if (s <= 0.0) {
        s = kGuidanceFloor;
        if (diag != nullptr) ++diag->clamp_events;
      }
      log_s += w * std::log(s);
    }
    dst[k] = std::exp(log_s);
  }
  return out;
}

}  // namespace maskdiff
