#include "maskdiff/synthdata.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <exception>
#include <limits>
#include <map>

namespace maskdiff::synth {
namespace {

using Key = std::vector<Token>;

Key key_of(const TokenGrid& g) { return Key(g.tokens().begin(), g.tokens().end()); }

Matrix one_hot_rows(const std::vector<std::size_t>& idx, std::size_t dim) {
  Matrix m(idx.size(), dim);
  for (std::size_t i = 0; i < idx.size(); ++i) m(i, idx[i]) = 1.0;
  return m;
}

std::vector<std::size_t> one_hot_decode(const Matrix& m, const char* what) {
  std::vector<std::size_t> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::size_t hot = m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (m(i, c) == 1.0 && hot == m.cols()) {
        hot = c;
      } else if (m(i, c) != 0.0) {
        hot = m.cols();
        break;
      }
    }
    if (hot == m.cols()) throw InvalidInput(std::string(what) + " row is not one-hot");
    out[i] = hot;
  }
  return out;
}

// P(frame value v | previous value prev) for the Markov variant.
double transition(const ProcessConfig& cfg, std::span<const double> row, Token prev, Token v) {
  return cfg.markov_stay * (prev == v ? 1.0 : 0.0) + (1.0 - cfg.markov_stay) * row[v];
}

Token draw_from(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    acc += p[v];
    if (u < acc) return static_cast<Token>(v);
  }
  // Rounding left u above the running sum: take the last nonzero entry.
  for (std::size_t v = p.size(); v-- > 0;)
    if (p[v] > 0.0) return static_cast<Token>(v);
  return 0;
}

void check_labels(const ProcessConfig& cfg, const Labels& l, std::size_t length) {
  if (length == 0 || length % cfg.window != 0) {
    throw ConfigError("synth: length must be a positive multiple of the window");
  }
  if (l.semantic.size() != length || l.temporal.size() != length / cfg.window) {
    throw ShapeError("synth: label lengths do not match the grid");
  }
  for (std::size_t a : l.semantic)
    if (a >= cfg.semantic) throw InvalidInput("synth: semantic label out of range");
  for (std::size_t e : l.temporal)
    if (e >= cfg.temporal) throw InvalidInput("synth: temporal label out of range");
  if (l.global >= cfg.global) throw InvalidInput("synth: global label out of range");
}

}  // namespace

std::string to_string(EmissionKind k) {
  switch (k) {
    case EmissionKind::Uniform: return "uniform";
    case EmissionKind::OneHot: return "one_hot";
    case EmissionKind::Peaked: return "peaked";
    case EmissionKind::Random: return "random";
  }
  return "?";
}

EmissionKind emission_kind_from_string(const std::string& s) {
  if (s == "uniform") return EmissionKind::Uniform;
  if (s == "one_hot") return EmissionKind::OneHot;
  if (s == "peaked") return EmissionKind::Peaked;
  if (s == "random") return EmissionKind::Random;
  throw ConfigError("unknown emission kind '" + s + "'");
}

void ProcessConfig::validate() const {
  if (vocab == 0 || vocab >= kMask) throw ConfigError("synth: vocab must be in [1, 65535)");
  if (levels == 0 || semantic == 0 || global == 0 || temporal == 0 || window == 0) {
    throw ConfigError("synth: levels, alphabet sizes and window must be positive");
  }
  if (!(peak_mass >= 0.0 && peak_mass <= 1.0)) throw ConfigError("synth: peak_mass not in [0, 1]");
  if (!(markov_stay >= 0.0 && markov_stay <= 1.0)) {
    throw ConfigError("synth: markov_stay not in [0, 1]");
  }
}

Process::Process(const ProcessConfig& cfg, std::vector<double> table)
    : cfg_(cfg), table_(std::move(table)) {
  cfg_.validate();
  if (table_.size() != cfg.semantic * cfg.global * cfg.temporal * cfg.vocab) {
    throw ShapeError("synth: emission table has the wrong size");
  }
  validate();
}

Process Process::make(const ProcessConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = cfg.vocab;
  const std::size_t shift = rng.below(n);
  std::vector<double> table;
  table.reserve(cfg.semantic * cfg.global * cfg.temporal * n);
  for (std::size_t a = 0; a < cfg.semantic; ++a) {
    for (std::size_t g = 0; g < cfg.global; ++g) {
      for (std::size_t e = 0; e < cfg.temporal; ++e) {
        const std::size_t dom = (3 * a + 5 * g + 2 * e + shift) % n;
        std::vector<double> row(n);
        switch (cfg.emission) {
          case EmissionKind::Uniform:
            std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(n));
            break;
          case EmissionKind::OneHot:
            row[dom] = 1.0;
            break;
          case EmissionKind::Peaked: {
            const double rest = n > 1 ? (1.0 - cfg.peak_mass) / static_cast<double>(n - 1) : 0.0;
            std::fill(row.begin(), row.end(), rest);
            row[dom] = n > 1 ? cfg.peak_mass : 1.0;
            break;
          }
          case EmissionKind::Random: {
            double sum = 0.0;
            for (double& p : row) {
              p = -std::log1p(-rng.uniform());
              sum += p;
            }
            for (double& p : row) p /= sum;
            break;
          }
        }
        table.insert(table.end(), row.begin(), row.end());
      }
    }
  }
  return Process(cfg, std::move(table));
}

void Process::validate() const {
  const std::size_t n = cfg_.vocab;
  for (std::size_t off = 0; off < table_.size(); off += n) {
    double sum = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double p = table_[off + v];
      if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidInput("synth: negative emission entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw InvalidInput("synth: emission row does not sum to 1");
  }
}

std::span<const double> Process::emission(std::size_t a, std::size_t g, std::size_t e) const {
  const std::size_t row = (a * cfg_.global + g) * cfg_.temporal + e;
  return {table_.data() + row * cfg_.vocab, cfg_.vocab};
}

Token Process::level_token(Token v, std::size_t level, std::size_t g) const {
  if (level == 0) return v;
  return static_cast<Token>((v + (level + 1) * g) % cfg_.vocab);
}

ConditionShape Process::condition_shape(std::size_t length) const {
  return ConditionShape{length, cfg_.window, cfg_.semantic, cfg_.global, cfg_.temporal};
}

ConditionBundle Process::encode(const Labels& labels) const {
  check_labels(cfg_, labels, labels.semantic.size());
  ConditionBundle c;
  c.semantic = one_hot_rows(labels.semantic, cfg_.semantic);
  c.global_style = one_hot_rows({labels.global}, cfg_.global);
  c.temporal_style = one_hot_rows(labels.temporal, cfg_.temporal);
  return c;
}

Labels Process::decode(const ConditionBundle& cond) const {
  if (!cond.semantic || !cond.global_style || !cond.temporal_style) {
    throw InvalidInput("synth: condition has a null slot");
  }
  if (cond.semantic->cols() != cfg_.semantic || cond.global_style->cols() != cfg_.global ||
      cond.global_style->rows() != 1 || cond.temporal_style->cols() != cfg_.temporal) {
    throw ShapeError("synth: condition widths do not match the process");
  }
  Labels l;
  l.semantic = one_hot_decode(*cond.semantic, "semantic");
  l.global = one_hot_decode(*cond.global_style, "global style")[0];
  l.temporal = one_hot_decode(*cond.temporal_style, "temporal style");
  check_labels(cfg_, l, l.semantic.size());
  return l;
}

TokenGrid draw(const Process& proc, const Labels& labels, Rng& rng) {
  const auto& cfg = proc.config();
  const std::size_t L = labels.semantic.size();
  check_labels(cfg, labels, L);
  TokenGrid grid(L, cfg.levels, cfg.vocab);
  for (std::size_t i = 0; i < L; ++i) {
    const auto row = proc.emission(labels.semantic[i], labels.global, labels.temporal[i / cfg.window]);
    Token v;
    if (cfg.markov && i > 0 && rng.bernoulli(cfg.markov_stay)) {
      v = grid.at(i - 1, 0);
    } else {
      v = draw_from(row, rng);
    }
    for (std::size_t l = 0; l < cfg.levels; ++l) grid.at(i, l) = proc.level_token(v, l, labels.global);
  }
  return grid;
}

Sample generate_one(const Process& proc, std::size_t length, Rng& rng) {
  const auto& cfg = proc.config();
  if (length == 0 || length % cfg.window != 0) {
    throw ConfigError("synth: length must be a positive multiple of the window");
  }
  Sample s;
  s.labels.global = rng.below(cfg.global);
  s.labels.temporal.resize(length / cfg.window);
  for (auto& e : s.labels.temporal) e = rng.below(cfg.temporal);
  s.labels.semantic.resize(length);
  for (auto& a : s.labels.semantic) a = rng.below(cfg.semantic);
  s.grid = draw(proc, s.labels, rng);
  s.cond = proc.encode(s.labels);
  return s;
}

std::vector<Sample> generate(const Process& proc, std::size_t length, std::size_t count,
                             std::uint64_t seed) {
  if (length == 0 || length % proc.config().window != 0) {
    throw ConfigError("synth: length must be a positive multiple of the window");
  }
  std::vector<Sample> out(count);
  std::exception_ptr error;
  const std::int64_t total = static_cast<std::int64_t>(count);
#pragma omp parallel for schedule(static)
  for (std::int64_t k = 0; k < total; ++k) {
    try {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
      out[k] = generate_one(proc, length, rng);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

DataDistribution exact_conditional(const Process& proc, const Labels& labels, std::size_t length,
                                   std::size_t budget) {
  const auto& cfg = proc.config();
  check_labels(cfg, labels, length);
  const std::size_t n = cfg.vocab;
  std::size_t outcomes = 1;
  for (std::size_t i = 0; i < length; ++i) {
    if (outcomes > budget / n) {
      throw BudgetError("exact_conditional: n^L exceeds the enumeration budget of " +
                        std::to_string(budget));
    }
    outcomes *= n;
  }

  std::vector<std::span<const double>> rows(length);
  for (std::size_t i = 0; i < length; ++i) {
    rows[i] = proc.emission(labels.semantic[i], labels.global, labels.temporal[i / cfg.window]);
  }

  DataDistribution dist;
  std::vector<Token> v(length, 0);
  for (std::size_t k = 0; k < outcomes; ++k) {
    double p = rows[0][v[0]];
    for (std::size_t i = 1; i < length && p > 0.0; ++i) {
      p *= cfg.markov ? transition(cfg, rows[i], v[i - 1], v[i]) : rows[i][v[i]];
    }
    if (p > 0.0) {
      TokenGrid g(length, cfg.levels, n);
      for (std::size_t i = 0; i < length; ++i)
        for (std::size_t l = 0; l < cfg.levels; ++l) g.at(i, l) = proc.level_token(v[i], l, labels.global);
      dist.support.emplace_back(std::move(g), p);
    }
    // Odometer with the last frame fastest.
    for (std::size_t i = length; i-- > 0;) {
      if (++v[i] < n) break;
      v[i] = 0;
    }
  }
  return dist;
}

DataDistribution exact_conditional(const Process& proc, const ConditionBundle& cond,
                                   std::size_t length, std::size_t budget) {
  return exact_conditional(proc, proc.decode(cond), length, budget);
}

std::vector<double> first_frame_marginal(const Process& proc, const Labels& labels) {
  check_labels(proc.config(), labels, labels.semantic.size());
  const auto row = proc.emission(labels.semantic[0], labels.global, labels.temporal[0]);
  return {row.begin(), row.end()};
}

std::vector<double> first_frame_histogram(const std::vector<TokenGrid>& grids, std::size_t vocab) {
  std::vector<double> h(vocab, 0.0);
  if (grids.empty()) return h;
  for (const auto& g : grids) {
    if (g.masked(0, 0) || g.at(0, 0) >= vocab) throw InvalidInput("histogram: bad first token");
    h[g.at(0, 0)] += 1.0;
  }
  for (double& x : h) x /= static_cast<double>(grids.size());
  return h;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) s += std::abs(p[k] - q[k]);
  return 0.5 * s;
}

double total_variation(const std::vector<TokenGrid>& samples, const DataDistribution& dist) {
  if (samples.empty()) throw InvalidInput("total_variation: no samples");
  std::map<Key, double> diff;
  for (const auto& [g, p] : dist.support) diff[key_of(g)] -= p;
  const double w = 1.0 / static_cast<double>(samples.size());
  for (const auto& g : samples) diff[key_of(g)] += w;
  double s = 0.0;
  for (const auto& [k, d] : diff) s += std::abs(d);
  return 0.5 * s;
}

ChiSquare chi_square(const std::vector<TokenGrid>& samples, const DataDistribution& dist) {
  if (samples.empty()) throw InvalidInput("chi_square: no samples");
  std::map<Key, std::size_t> counts;
  for (const auto& g : samples) ++counts[key_of(g)];
  const double N = static_cast<double>(samples.size());

  ChiSquare out;
  std::size_t matched = 0, cells = 0;
  double pooled_obs = 0.0, pooled_exp = 0.0;
  for (const auto& [g, p] : dist.support) {
    const auto it = counts.find(key_of(g));
    const double obs = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    matched += static_cast<std::size_t>(obs);
    const double exp = N * p;
    if (exp < 5.0) {
      pooled_obs += obs;
      pooled_exp += exp;
      continue;
    }
    out.statistic += (obs - exp) * (obs - exp) / exp;
    ++cells;
  }
  if (matched != samples.size()) {
    out.statistic = std::numeric_limits<double>::infinity();
    out.p_value = 0.0;
    return out;
  }
  if (pooled_exp > 0.0) {
    out.statistic += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
    ++cells;
  }
  out.dof = cells > 1 ? cells - 1 : 0;
  if (out.dof == 0) return out;
  boost::math::chi_squared_distribution<double> chi(static_cast<double>(out.dof));
  out.p_value = boost::math::cdf(boost::math::complement(chi, out.statistic));
  return out;
}

}  // namespace maskdiff::synth
