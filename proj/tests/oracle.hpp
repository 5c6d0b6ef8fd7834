#pragma once

// Brute-force reference computations used as test oracles. Nothing here calls
// into the code under test beyond plain data types, so agreement is evidence
// rather than tautology.

#include <cmath>
#include <map>
#include <vector>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/matrix.hpp"

namespace oracle {

using maskdiff::Matrix;
using maskdiff::Token;
using maskdiff::TokenGrid;
using maskdiff::kMask;

/// Masked fraction of the log-linear schedule, written directly.
inline double mask_prob(double eps, double t) { return 1.0 - std::exp(std::log1p(-(1.0 - eps) * t)); }

/// p_t(xt) = sum over x0 of p(x0) * prod over cells of the one-cell kernel.
inline double marginal(const TokenGrid& xt,
                       const std::vector<std::pair<TokenGrid, double>>& support, double m) {
  double total = 0.0;
  for (const auto& [x0, p] : support) {
    double lik = p;
    for (std::size_t c = 0; c < xt.cells() && lik > 0.0; ++c) {
      const Token a = xt.tokens()[c];
      lik *= a == kMask ? m : (a == x0.tokens()[c] ? 1.0 - m : 0.0);
    }
    total += lik;
  }
  return total;
}

/// Concrete score by the definition p_t(x with cell = v) / p_t(x).
inline double concrete_score(const TokenGrid& xt, std::size_t i, std::size_t r, Token v,
                             const std::vector<std::pair<TokenGrid, double>>& support, double m) {
  TokenGrid y = xt;
  y.at(i, r) = v;
  return marginal(y, support, m) / marginal(xt, support, m);
}

/// Score entropy term by term, with the target from the point-mass score.
inline double dse(const std::vector<double>& s, const std::vector<double>& c, double sigma) {
  double total = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double K = c[k] > 0.0 ? c[k] * std::log(c[k]) - c[k] : 0.0;
    total += sigma * (s[k] - (c[k] > 0.0 ? c[k] * std::log(s[k]) : 0.0) + K);
  }
  return total;
}

/// Naive triple loop.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

/// Frame-wise modulated normalization written straight from the formula.
inline Matrix dual_ada_ln(const Matrix& h, const std::vector<double>& gch,
                          const std::vector<double>& bch, const std::vector<double>& gte,
                          std::size_t window, double floor) {
  Matrix out(h.rows(), h.cols());
  const double C = static_cast<double>(h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t c = 0; c < h.cols(); ++c) mu += h(i, c);
    mu /= C;
    double var = 0.0;
    for (std::size_t c = 0; c < h.cols(); ++c) var += (h(i, c) - mu) * (h(i, c) - mu);
    var = std::max(var / C, floor);
    for (std::size_t c = 0; c < h.cols(); ++c) {
      const double xn = (h(i, c) - mu) / std::sqrt(var);
      out(i, c) = gte[i / window] * ((1.0 + gch[c]) * xn + bch[c]);
    }
  }
  return out;
}

/// Empirical distribution over whole grids.
inline std::map<std::vector<Token>, double> histogram(const std::vector<TokenGrid>& grids) {
  std::map<std::vector<Token>, double> h;
  for (const auto& g : grids) h[{g.tokens().begin(), g.tokens().end()}] += 1.0 / grids.size();
  return h;
}

inline double tv(const std::map<std::vector<Token>, double>& emp,
                 const std::vector<std::pair<TokenGrid, double>>& support) {
  std::map<std::vector<Token>, double> d = emp;
  for (const auto& [g, p] : support) d[{g.tokens().begin(), g.tokens().end()}] -= p;
  double s = 0.0;
  for (const auto& [k, v] : d) s += std::abs(v);
  return 0.5 * s;
}

}  // namespace oracle
