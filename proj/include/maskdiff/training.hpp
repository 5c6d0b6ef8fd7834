#pragma once

// Score-network training: multi-level DSE summed over the active levels,
// hierarchical condition dropout, a level curriculum and AdamW. Also the
// standalone auxiliary losses (error detector, style alignment) and the
// windowed logit averager.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/model.hpp"

namespace maskdiff::train {

struct Example {
  TokenGrid grid;
  ConditionBundle cond;
};

struct CurriculumStage {
  std::size_t step = 0;    // first step at which the stage applies
  std::size_t levels = 1;  // r_l: active residual levels

  friend bool operator==(const CurriculumStage&, const CurriculumStage&) = default;
};

/// (0, 1), (T/3, ceil(R/2)), (2T/3, R), with stages that would not advance
/// either coordinate dropped.
std::vector<CurriculumStage> default_curriculum(std::size_t steps, std::size_t levels);

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 1000;
  /// Per-slot null probability, applied to bundles that survive the
  /// all-null draw. Per-slot marginal: all_null + (1 - all_null) * slot_dropout.
  double slot_dropout = 0.1;
  double all_null = 0.1;
  /// Empty means default_curriculum(steps, R).
  std::vector<CurriculumStage> curriculum;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  /// Lower end of the training-time law t ~ U(t_min, 1).
  double t_min = 1e-3;
  std::uint64_t seed = 0;

  /// Throws ConfigError; `levels` is the network's R.
  void validate(std::size_t levels) const;
  std::vector<CurriculumStage> stages(std::size_t levels) const;
  /// r_l in force at `step`.
  std::size_t levels_at(std::size_t step, std::size_t levels) const;
  /// Implied probability that a given slot is null.
  double marginal_null_rate() const { return all_null + (1.0 - all_null) * slot_dropout; }
};

/// Draws which slots to keep: all-null with probability all_null, otherwise
/// each slot independently dropped with probability slot_dropout.
ConditionMask draw_dropout(const TrainConfig& cfg, Rng& rng);

/// Decoupled-weight-decay Adam state.
class AdamW {
 public:
  explicit AdamW(const ScoreNetwork& net);
  /// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
  void update(ScoreNetwork& net, const Gradients& grads, const TrainConfig& cfg);
  std::size_t step_count() const noexcept { return t_; }

 private:
  Gradients m_, v_;
  std::size_t t_ = 0;
};

/// One training item after time sampling, truncation, dropout and corruption.
struct PreparedItem {
  TokenGrid x0;
  TokenGrid xt;
  ConditionBundle cond;
  double t = 0.0;
};

/// Item k of step s uses Rng(derive_seed(derive_seed(seed, s), k)).
std::vector<PreparedItem> prepare_batch(std::span<const Example> batch, const TrainConfig& cfg,
                                        std::size_t step, std::size_t levels,
                                        const NoiseSchedule& sched);

/// Mean over items of the summed-level DSE, with any score function. With
/// the exact score of the data this is the loss train_step would report.
double batch_loss(const ScoreFn& score_fn, std::span<const PreparedItem> items,
                  const NoiseSchedule& sched);

/// One optimizer step on `batch`; returns the pre-update batch loss. Throws
/// NumericFault (where() = batch index) on a non-finite loss or gradient,
/// leaving the parameters untouched.
double train_step(ScoreNetwork& net, AdamW& opt, std::span<const Example> batch,
                  const TrainConfig& cfg, std::size_t step);

struct LogRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t levels = 0;
  double wall_seconds = 0.0;
};
void write_jsonl(const LogRecord& rec, std::ostream& out);

using StepCallback = std::function<void(const LogRecord&, const ScoreNetwork&)>;

/// Runs cfg.steps steps. Batch s draws batch_size examples with replacement
/// from Rng(derive_seed(seed ^ batch stream, s)).
void fit(ScoreNetwork& net, std::span<const Example> data, const TrainConfig& cfg,
         const StepCallback& on_step = {});

/// Mean summed-level DSE over `data` at the network's full depth, example k
/// at t ~ U(t_min, 1) drawn from Rng(derive_seed(seed, k)), conditions kept.
double heldout_dse(const ScoreNetwork& net, std::span<const Example> data, double t_min,
                   std::uint64_t seed);

// --- auxiliary losses -------------------------------------------------------

inline constexpr double kProbabilityFloor = 1e-7;

/// Mean binary cross-entropy of `probs` against labels y_i = [cos(pred_i,
/// gt_i) >= threshold]. Probabilities are clamped to [1e-7, 1 - 1e-7].
/// Throws InvalidInput (naming the index) on a zero-norm embedding.
double detector_loss(std::span<const double> probs, const std::vector<std::vector<double>>& pred,
                     const std::vector<std::vector<double>>& gt, double threshold = 0.9);

/// 1 - cos(a, b) + mean |a - b| + sqrt(mean (a - b)^2).
double style_alignment_loss(std::span<const double> a, std::span<const double> b);

/// Window means of L x E logits: row w is the mean of rows [wU, (w + 1)U).
Matrix temporal_smooth(const Matrix& logits, std::size_t window);

}  // namespace maskdiff::train
