#pragma once

// Ground-truth conditional token process. Each frame carries a semantic
// symbol a, each window a temporal style e, and the whole sequence a global
// style g. The level-0 token of frame i is drawn from emission(a_i, g, e_w);
// deeper level l (0-based) holds (v + (l + 1) * g) mod n, a bijection of the
// level-0 token v for fixed g. Conditions reach the network as one-hot rows.

#include <cstdint>
#include <string>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/diffusion.hpp"

namespace maskdiff::synth {

enum class EmissionKind { Uniform, OneHot, Peaked, Random };

std::string to_string(EmissionKind k);
EmissionKind emission_kind_from_string(const std::string& s);

struct ProcessConfig {
  std::size_t vocab = 8;      // n
  std::size_t levels = 2;     // R
  std::size_t semantic = 4;   // A
  std::size_t global = 2;     // G
  std::size_t temporal = 2;   // E
  std::size_t window = 4;     // U
  EmissionKind emission = EmissionKind::Peaked;
  /// Probability on the dominant token for Peaked tables.
  double peak_mass = 0.8;
  /// First-order variant: frame i copies frame i-1 with probability
  /// markov_stay, otherwise draws from its emission row.
  bool markov = false;
  double markov_stay = 0.5;

  void validate() const;
};

/// Condition symbols for one sequence.
struct Labels {
  std::vector<std::size_t> semantic;  // per frame, in [0, A)
  std::size_t global = 0;             // in [0, G)
  std::vector<std::size_t> temporal;  // per window, in [0, E)

  friend bool operator==(const Labels&, const Labels&) = default;
};

class Process {
 public:
  /// Builds the emission table. Peaked and OneHot tables put their mass on
  /// (3a + 5g + 2e + s) mod n with s drawn from `rng`; Random rows are
  /// normalized exponential draws.
  static Process make(const ProcessConfig& cfg, Rng& rng);

  /// Explicit table, A * G * E rows of n entries, (a, g, e) row-major.
  Process(const ProcessConfig& cfg, std::vector<double> table);

  const ProcessConfig& config() const noexcept { return cfg_; }
  std::span<const double> emission(std::size_t a, std::size_t g, std::size_t e) const;
  std::span<const double> table() const noexcept { return table_; }
  /// Level-l token given the level-0 token v and global style g.
  Token level_token(Token v, std::size_t level, std::size_t g) const;

  ConditionShape condition_shape(std::size_t length) const;
  /// One-hot encoding of `labels` with every slot present.
  ConditionBundle encode(const Labels& labels) const;
  /// Inverse of encode; throws InvalidInput on a null slot or a row that is
  /// not one-hot.
  Labels decode(const ConditionBundle& cond) const;

  /// Throws InvalidInput unless every emission row is a distribution (sum 1
  /// within 1e-12).
  void validate() const;

 private:
  ProcessConfig cfg_;
  std::vector<double> table_;
};

struct Sample {
  TokenGrid grid;
  ConditionBundle cond;
  Labels labels;
};

/// Conditions drawn uniformly, then tokens. Sample k uses
/// Rng(derive_seed(seed, k)), so output is independent of the thread count.
std::vector<Sample> generate(const Process& proc, std::size_t length, std::size_t count,
                             std::uint64_t seed);
Sample generate_one(const Process& proc, std::size_t length, Rng& rng);
/// Tokens only, for fixed labels.
TokenGrid draw(const Process& proc, const Labels& labels, Rng& rng);

inline constexpr std::size_t kEnumerationBudget = 1'000'000;

/// Every grid with nonzero probability under the process given `labels`.
/// Throws BudgetError when n^L exceeds `budget`.
DataDistribution exact_conditional(const Process& proc, const Labels& labels, std::size_t length,
                                   std::size_t budget = kEnumerationBudget);
DataDistribution exact_conditional(const Process& proc, const ConditionBundle& cond,
                                   std::size_t length, std::size_t budget = kEnumerationBudget);

/// Exact distribution of the level-0 token of frame 0.
std::vector<double> first_frame_marginal(const Process& proc, const Labels& labels);

/// Empirical distribution of the level-0 token of frame 0.
std::vector<double> first_frame_histogram(const std::vector<TokenGrid>& grids, std::size_t vocab);

/// Half the l1 distance between two distributions on the same support.
double total_variation(std::span<const double> p, std::span<const double> q);

/// TV between an empirical sample of grids and an enumerated distribution,
/// over the union of their supports.
double total_variation(const std::vector<TokenGrid>& samples, const DataDistribution& dist);

struct ChiSquare {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Pearson goodness-of-fit of sampled grids against `dist`. Outcomes with an
/// expected count below 5 are pooled into one cell; samples outside the
/// support make the statistic infinite.
ChiSquare chi_square(const std::vector<TokenGrid>& samples, const DataDistribution& dist);

}  // namespace maskdiff::synth
