#pragma once

// Conditional score network: per-level token embeddings summed per frame,
// channel concatenation with the projected semantic track, a stack of
// dual-adaptive-norm transformer blocks, and one output head per residual
// level. Channel modulation (alpha, gamma, beta) comes from the global style
// and time; per-window temporal scales come from the temporal style and time.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/matrix.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct ModelConfig {
  std::size_t length = 8;        // L
  std::size_t levels = 4;        // R
  std::size_t vocab = 16;        // n
  std::size_t width = 64;        // C
  std::size_t semantic_dim = 4;  // C_sem
  std::size_t global_dim = 2;    // C_id
  std::size_t temporal_dim = 2;  // C_emo
  std::size_t window = 4;        // U
  std::size_t blocks = 4;        // B
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t time_dim = 32;
  /// Test mode: false bypasses the attention branch so frames only interact
  /// through the (global) channel modulation.
  bool attention = true;
  double var_floor = 1e-5;
  NoiseSchedule schedule;

  void validate() const;
  ConditionShape condition_shape() const;
  friend bool operator==(const ModelConfig& a, const ModelConfig& b);
};

struct Parameter {
  std::string name;
  Matrix value;
};

/// Parameter-shaped gradient collection.
using Gradients = std::vector<Matrix>;

/// Maps a score field to a scalar loss and writes d loss / d log score into
/// the span (ScoreField value layout).
using OutputLoss = std::function<double(const ScoreField&, std::span<double>)>;

struct GradientItem {
  TokenGrid xt;
  ConditionBundle cond;
  double t = 0.5;
  OutputLoss loss;
};

class ScoreNetwork {
 public:
  /// All parameters zero.
  explicit ScoreNetwork(const ModelConfig& cfg);

  /// Standard initialization: Xavier-uniform linears, zero biases, zero
  /// output heads and channel modulation (residual gates start closed),
  /// temporal scales start at exactly 1.
  void init(Rng& rng);
  /// Every parameter drawn uniformly from [lo, hi].
  void init_uniform(Rng& rng, double lo, double hi);

  const ModelConfig& config() const noexcept { return cfg_; }
  std::span<Parameter> parameters() noexcept { return params_; }
  std::span<const Parameter> parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;
  Gradients zero_gradients() const;

  /// Index of the parameter called `name`; throws InvalidInput if absent.
  std::size_t index_of(const std::string& name) const;

  /// Row i = sum over levels r of embedding_r[xt(i, r)] (MASK uses row n).
  Matrix embed(const TokenGrid& xt) const;

  /// exp(head logits) for every cell; `defined` marks masked cells. Grids
  /// with fewer levels than the network use the leading heads only.
  ScoreField forward(const TokenGrid& xt, const ConditionBundle& cond, double t) const;

  /// Forward and backward for one item; adds d loss / d theta into `grads`.
  double accumulate_gradient(const GradientItem& item, Gradients& grads) const;

  /// Bundle with every null slot replaced by the learned null embedding.
  ConditionBundle fill_nulls(const ConditionBundle& cond) const;

  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  /// Throws IoError on malformed files and ConfigError when `expected` is
  /// given and the stored shape differs from it.
  static ScoreNetwork load(std::istream& in, const ModelConfig* expected = nullptr);
  static ScoreNetwork load(const std::filesystem::path& path,
                           const ModelConfig* expected = nullptr);

 private:
  struct Layout;
  double run(const TokenGrid& xt, const ConditionBundle& cond, double t, ScoreField* scores,
             const GradientItem* item, Gradients* grads) const;
  void add(std::string name, std::size_t rows, std::size_t cols);

  ModelConfig cfg_;
  std::vector<Parameter> params_;
};

/// Channel/temporal adaptive normalization on plain matrices:
/// out[i] = gamma_te[i / window] * ((1 + gamma_ch) * norm(h[i]) + beta_ch).
/// gamma_ch, beta_ch have C entries; gamma_te has L / window entries.
Matrix dual_ada_ln(const Matrix& h, std::span<const double> gamma_ch,
                   std::span<const double> beta_ch, std::span<const double> gamma_te,
                   std::size_t window, double var_floor = 1e-5);

/// Sum over items of loss and gradient (plus l2 * theta when l2 != 0, the
/// gradient of l2/2 * |theta|^2). Items are evaluated in parallel and reduced
/// in a fixed order, so the result does not depend on the thread count.
/// A NumericFault raised for any item is re-raised with where() = item index.
double gradient(const ScoreNetwork& net, std::span<const GradientItem> items, Gradients& out,
                double l2 = 0.0);

/// 1 x time_dim sinusoidal features of sigma_bar(t).
Matrix time_features(const ModelConfig& cfg, double t);

/// ScoreFn adapter over a network.
ScoreFn as_score_fn(const ScoreNetwork& net);

}  // namespace maskdiff
