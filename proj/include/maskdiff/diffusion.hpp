#pragma once

// Absorbing-state discrete diffusion over L x R token grids: forward
// corruption, the exact concrete score of an enumerated data distribution, the
// denoising score entropy objective, and the reverse Euler sampler.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "maskdiff/common.hpp"
#include "maskdiff/condition.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

using Token = std::uint16_t;
inline constexpr Token kMask = 0xFFFF;

/// L frames by R residual levels of tokens in [0, vocab) or kMask.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(std::size_t length, std::size_t levels, std::size_t vocab, Token fill = kMask);

  std::size_t length() const noexcept { return length_; }
  std::size_t levels() const noexcept { return levels_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t cells() const noexcept { return tokens_.size(); }

  Token& at(std::size_t i, std::size_t r) { return tokens_[i * levels_ + r]; }
  Token at(std::size_t i, std::size_t r) const { return tokens_[i * levels_ + r]; }
  bool masked(std::size_t i, std::size_t r) const { return at(i, r) == kMask; }

  std::span<Token> tokens() noexcept { return tokens_; }
  std::span<const Token> tokens() const noexcept { return tokens_; }

  std::size_t masked_count() const;
  bool has_mask() const { return masked_count() > 0; }

  /// First `levels` levels only.
  TokenGrid truncated(std::size_t levels) const;

  /// Throws InvalidInput if any entry is neither in [0, vocab) nor kMask.
  void validate() const;

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;

 private:
  std::size_t length_ = 0;
  std::size_t levels_ = 0;
  std::size_t vocab_ = 0;
  std::vector<Token> tokens_;
};

/// Concrete-score estimates: for every cell (i, r) and value v, an estimate of
/// p_t(grid with (i, r) = v) / p_t(grid). Only cells flagged in `defined`
/// (the masked ones) carry meaning.
class ScoreField {
 public:
  ScoreField() = default;
  ScoreField(std::size_t length, std::size_t levels, std::size_t vocab);

  std::size_t length() const noexcept { return length_; }
  std::size_t levels() const noexcept { return levels_; }
  std::size_t vocab() const noexcept { return vocab_; }

  double& at(std::size_t i, std::size_t r, std::size_t v) {
    return values_[(i * levels_ + r) * vocab_ + v];
  }
  double at(std::size_t i, std::size_t r, std::size_t v) const {
    return values_[(i * levels_ + r) * vocab_ + v];
  }
  std::span<double> cell(std::size_t i, std::size_t r) {
    return {values_.data() + (i * levels_ + r) * vocab_, vocab_};
  }
  std::span<const double> cell(std::size_t i, std::size_t r) const {
    return {values_.data() + (i * levels_ + r) * vocab_, vocab_};
  }

  bool defined(std::size_t i, std::size_t r) const { return defined_[i * levels_ + r] != 0; }
  void set_defined(std::size_t i, std::size_t r, bool d) { defined_[i * levels_ + r] = d; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool same_shape(const ScoreField& o) const {
    return length_ == o.length_ && levels_ == o.levels_ && vocab_ == o.vocab_;
  }

  friend bool operator==(const ScoreField&, const ScoreField&) = default;

 private:
  std::size_t length_ = 0;
  std::size_t levels_ = 0;
  std::size_t vocab_ = 0;
  std::vector<double> values_;
  std::vector<char> defined_;
};

/// Explicit finite distribution over clean grids (oracle use).
struct DataDistribution {
  std::vector<std::pair<TokenGrid, double>> support;

  /// Throws InvalidInput unless the support is non-empty, shares one shape,
  /// is MASK-free, has nonnegative weights and sums to 1 within 1e-12.
  void validate() const;

  static DataDistribution point_mass(const TokenGrid& x0);
};

/// Replaces each cell independently with kMask with probability
/// mask_probability(t).
TokenGrid corrupt(const TokenGrid& x0, double t, const NoiseSchedule& sched, Rng& rng);

/// e^{-sigma_bar} / (1 - e^{-sigma_bar}) = 1 / expm1(sigma_bar): the concrete
/// score of unmasking a cell to its clean value under p(. | x0).
double unmask_ratio(const NoiseSchedule& sched, double t);

/// Exact p_t(x with (i,r)=v) / p_t(x) over the enumerated distribution.
ScoreField exact_concrete_score(const TokenGrid& xt, double t, const DataDistribution& dist,
                                const NoiseSchedule& sched);

/// Denoising score entropy integrand for one (x0, xt, t). The convention
/// 0 * log s = 0 applies where the target is zero.
double dse_loss(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0, double t,
                const NoiseSchedule& sched);

/// dse_loss and its gradient with respect to log-scores, written into
/// `dlog_scores` (same layout as ScoreField values; zero outside masked cells).
double dse_loss_with_grad(const ScoreField& scores, const TokenGrid& xt, const TokenGrid& x0,
                          double t, const NoiseSchedule& sched, std::span<double> dlog_scores);

/// Sampler bookkeeping, written as one JSON record per line when requested.
struct SamplerDiagnostics {
  struct Step {
    double t = 0.0;
    std::size_t unmasked = 0;     // cells that left MASK this step
    std::size_t renormalized = 0; // cells whose jump mass exceeded 1
  };
  std::vector<Step> steps;
  std::size_t forced_unmask = 0;  // residual MASK resolved by argmax
  std::size_t clamp_events = 0;   // zero scores floored by guided_score

  void write_jsonl(std::ostream& out) const;
};

/// One first-order reverse step from t to t - dt.
TokenGrid euler_step(const TokenGrid& xt, const ScoreField& scores, double t, double dt,
                     const NoiseSchedule& sched, Rng& rng, SamplerDiagnostics* diag = nullptr);

using ScoreFn = std::function<ScoreField(const TokenGrid&, const ConditionBundle&, double)>;

struct GridShape {
  std::size_t length = 0;
  std::size_t levels = 0;
  std::size_t vocab = 0;
};

/// Reverse sampling from the all-MASK grid at t = 1 on a uniform grid of
/// `steps` steps; residual MASK cells take the argmax of the last score field.
TokenGrid sample(const ScoreFn& score_fn, const ConditionBundle& cond, GridShape shape,
                 std::size_t steps, const NoiseSchedule& sched, Rng& rng,
                 SamplerDiagnostics* diag = nullptr);

/// Reverse sampling from a partially masked grid starting at t_start.
TokenGrid sample_from(const ScoreFn& score_fn, const ConditionBundle& cond, TokenGrid xt,
                      double t_start, std::size_t steps, const NoiseSchedule& sched, Rng& rng,
                      SamplerDiagnostics* diag = nullptr);

/// `count` independent samples, sample k drawn with Rng(derive_seed(seed, k)).
/// Output does not depend on the number of threads.
std::vector<TokenGrid> sample_batch(const ScoreFn& score_fn,
                                    const std::vector<ConditionBundle>& conds, GridShape shape,
                                    std::size_t steps, const NoiseSchedule& sched,
                                    std::uint64_t seed);

/// Log-linear guidance: log s* = (1 - sum w_k) log s_uncond + sum w_k log s_k.
/// Factors with exponent zero are dropped; a lone factor with exponent one is
/// returned unchanged. Zero scores carrying a nonzero exponent are floored at
/// kGuidanceFloor and counted in `diag`.
inline constexpr double kGuidanceFloor = 1e-12;
ScoreField guided_score(const ScoreField& uncond,
                        const std::vector<std::pair<ScoreField, double>>& conditioned,
                        SamplerDiagnostics* diag = nullptr);

}  // namespace maskdiff
