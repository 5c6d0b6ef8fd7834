#include "maskdiff/autodiff.hpp"

#include <cmath>

namespace maskdiff::ad {
namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

void add_into(Matrix& dst, const Matrix& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t k = 0; k < dst.size(); ++k) d[k] += s[k];
}

}  // namespace

Tape::Id Tape::push(Matrix value) {
  nodes_.push_back(Node{});
  nodes_.back().value = std::move(value);
  return nodes_.size() - 1;
}

Tape::Id Tape::constant(Matrix value) { return push(std::move(value)); }

Tape::Id Tape::param(const Matrix& value, Matrix* grad_target) {
  nodes_.push_back(Node{});
  Node& n = nodes_.back();
  n.ref = &value;
  if (record_ && grad_target != nullptr) {
    require_shape(*grad_target, value.rows(), value.cols(), "parameter gradient");
    n.grad_target = grad_target;
  }
  return nodes_.size() - 1;
}

const Matrix& Tape::value(Id id) const {
  const Node& n = nodes_[id];
  return n.ref != nullptr ? *n.ref : n.value;
}

Matrix& Tape::grad(Id id) {
  Node& n = nodes_[id];
  n.has_grad = true;
  if (n.grad_target != nullptr) return *n.grad_target;
  if (n.grad.empty()) {
    const Matrix& v = value(id);
    n.grad = Matrix(v.rows(), v.cols());
  }
  return n.grad;
}

bool Tape::has_grad(Id id) const { return nodes_[id].has_grad; }

void Tape::seed(Id id, const Matrix& g) {
  if (!record_) throw InvalidInput("Tape::seed on a non-recording tape");
  Matrix& dst = grad(id);
  if (!dst.same_shape(g)) throw ShapeError("Tape::seed: gradient shape differs from value");
  add_into(dst, g);
}

void Tape::backward() {
  if (!record_) throw InvalidInput("Tape::backward on a non-recording tape");
  for (Id id = nodes_.size(); id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.back) n.back();
  }
}

void Tape::backward(Id root, const Matrix& g) {
  seed(root, g);
  backward();
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
  const Matrix& xv = value(x);
  const Matrix& wv = value(w);
  const Matrix& bv = value(b);
  require_shape(bv, 1, wv.cols(), "linear bias");
  Matrix out;
  kernels::active::matmul(xv, wv, out);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) row[j] += bv(0, j);
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, x, w, b] {
      const Matrix& g = grad_in(id);
      kernels::active::matmul_bt_acc(g, value(w), grad(x));
      kernels::active::matmul_at_acc(value(x), g, grad(w));
      kernels::active::column_sums_acc(g, grad(b).flat());
    };
  }
  return id;
}

Tape::Id Tape::add(Id a, Id b) {
  if (!value(a).same_shape(value(b))) throw ShapeError("add: shapes differ");
  Matrix out = value(a);
  add_into(out, value(b));
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, a, b] {
      add_into(grad(a), grad_in(id));
      add_into(grad(b), grad_in(id));
    };
  }
  return id;
}

Tape::Id Tape::add_row(Id x, Id row) {
  const Matrix& rv = value(row);
  require_shape(rv, 1, value(x).cols(), "add_row");
  Matrix out = value(x);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += rv(0, j);
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, x, row] {
      add_into(grad(x), grad_in(id));
      kernels::active::column_sums_acc(grad_in(id), grad(row).flat());
    };
  }
  return id;
}

Tape::Id Tape::broadcast_rows(Id row, std::size_t rows) {
  const Matrix& rv = value(row);
  if (rv.rows() != 1) throw ShapeError("broadcast_rows: expected a single row");
  Matrix out(rows, rv.cols());
  for (std::size_t i = 0; i < rows; ++i) std::copy(rv.data(), rv.data() + rv.cols(), out.row(i).data());
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, row] {
      kernels::active::column_sums_acc(grad_in(id), grad(row).flat());
    };
  }
  return id;
}

Tape::Id Tape::concat_cols(Id a, Id b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row counts differ");
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto r = out.row(i);
    std::copy(av.row(i).begin(), av.row(i).end(), r.begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, a, b, ca, cb] {
      const Matrix& g = grad_in(id);
      Matrix& ga = grad(a);
      Matrix& gb = grad(b);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < ca; ++j) ga(i, j) += g(i, j);
        for (std::size_t j = 0; j < cb; ++j) gb(i, j) += g(i, ca + j);
      }
    };
  }
  return id;
}

Tape::Id Tape::slice_cols(Id x, std::size_t begin, std::size_t count) {
  const Matrix& xv = value(x);
  if (begin + count > xv.cols()) throw ShapeError("slice_cols: range out of bounds");
  Matrix out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, x, begin, count] {
      const Matrix& g = grad_in(id);
      Matrix& gx = grad(x);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) += g(i, j);
    };
  }
  return id;
}

Tape::Id Tape::silu(Id x) {
  Matrix out = value(x);
  for (double& v : out.flat()) v = v / (1.0 + std::exp(-v));
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, x] {
      const Matrix& xv = value(x);
      const Matrix& g = grad_in(id);
      Matrix& gx = grad(x);
      for (std::size_t k = 0; k < xv.size(); ++k) {
        const double s = 1.0 / (1.0 + std::exp(-xv.data()[k]));
        gx.data()[k] += g.data()[k] * s * (1.0 + xv.data()[k] * (1.0 - s));
      }
    };
  }
  return id;
}

Tape::Id Tape::gelu(Id x) {
  Matrix out = value(x);
  for (double& v : out.flat()) {
    const double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, x] {
      const Matrix& xv = value(x);
      const Matrix& g = grad_in(id);
      Matrix& gx = grad(x);
      for (std::size_t k = 0; k < xv.size(); ++k) {
        const double v = xv.data()[k];
        const double th = std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v));
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
        gx.data()[k] += g.data()[k] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
      }
    };
  }
  return id;
}

Tape::Id Tape::gated_residual(Id h, Id branch, Id alpha) {
  const Matrix& hv = value(h);
  const Matrix& bv = value(branch);
  const Matrix& av = value(alpha);
  if (!hv.same_shape(bv)) throw ShapeError("gated_residual: branch shape differs");
  require_shape(av, 1, hv.cols(), "gated_residual gate");
  Matrix out = hv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += av(0, c) * bv(i, c);
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, h, branch, alpha] {
      const Matrix& g = grad_in(id);
      const Matrix& bv = value(branch);
      const Matrix& av = value(alpha);
      add_into(grad(h), g);
      Matrix& gb = grad(branch);
      Matrix& ga = grad(alpha);
      for (std::size_t c = 0; c < g.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.rows(); ++i) {
          gb(i, c) += g(i, c) * av(0, c);
          acc += g(i, c) * bv(i, c);
        }
        ga(0, c) += acc;
      }
    };
  }
  return id;
}

Tape::Id Tape::dual_ada_ln(Id h, Id gamma_ch, Id beta_ch, Id gamma_te, std::size_t window,
                           double var_floor) {
  const Matrix& hv = value(h);
  const Matrix& gc = value(gamma_ch);
  const Matrix& bc = value(beta_ch);
  const Matrix& gt = value(gamma_te);
  const std::size_t L = hv.rows(), C = hv.cols();
  if (window == 0 || L % window != 0) throw ShapeError("dual_ada_ln: L not a multiple of U");
  require_shape(gc, 1, C, "dual_ada_ln gamma_ch");
  require_shape(bc, 1, C, "dual_ada_ln beta_ch");
  require_shape(gt, L / window, 1, "dual_ada_ln gamma_te");

  Matrix xhat;
  kernels::RowStats stats;
  kernels::active::normalize_rows(hv, var_floor, xhat, stats);
  Matrix out(L, C);
  for (std::size_t i = 0; i < L; ++i) {
    const double te = gt(i / window, 0);
    for (std::size_t c = 0; c < C; ++c) out(i, c) = te * ((1.0 + gc(0, c)) * xhat(i, c) + bc(0, c));
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, h, gamma_ch, beta_ch, gamma_te, window, xhat = std::move(xhat),
                       stats = std::move(stats)] {
      const Matrix& g = grad_in(id);
      const Matrix& gc = value(gamma_ch);
      const Matrix& bc = value(beta_ch);
      const Matrix& gt = value(gamma_te);
      const std::size_t L = g.rows(), C = g.cols();
      Matrix& dgt = grad(gamma_te);
      Matrix& dgc = grad(gamma_ch);
      Matrix& dbc = grad(beta_ch);
      Matrix dxhat(L, C);
      for (std::size_t i = 0; i < L; ++i) {
        const double te = gt(i / window, 0);
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          acc += g(i, c) * ((1.0 + gc(0, c)) * xhat(i, c) + bc(0, c));
          dxhat(i, c) = g(i, c) * te;
        }
        dgt(i / window, 0) += acc;
      }
      for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < L; ++i) {
          sg += dxhat(i, c) * xhat(i, c);
          sb += dxhat(i, c);
        }
        dgc(0, c) += sg;
        dbc(0, c) += sb;
      }
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < C; ++c) dxhat(i, c) *= 1.0 + gc(0, c);
      kernels::active::normalize_rows_backward(xhat, stats, dxhat, grad(h));
    };
  }
  return id;
}

Tape::Id Tape::attention(Id q, Id k, Id v, std::size_t heads) {
  Matrix out;
  std::vector<Matrix> probs;
  kernels::active::attention(value(q), value(k), value(v), heads, out, probs);
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, q, k, v, heads, probs = std::move(probs)] {
      kernels::active::attention_backward(value(q), value(k), value(v), heads, probs, grad_in(id),
                                          grad(q), grad(k), grad(v));
    };
  }
  return id;
}

Tape::Id Tape::embedding_sum(std::span<const Id> tables, std::span<const std::size_t> indices,
                             std::size_t rows) {
  const std::size_t levels = tables.size();
  if (levels == 0 || indices.size() != rows * levels) {
    throw ShapeError("embedding_sum: index count mismatch");
  }
  const std::size_t C = value(tables[0]).cols();
  Matrix out(rows, C);
  for (std::size_t i = 0; i < rows; ++i) {
    auto o = out.row(i);
    for (std::size_t r = 0; r < levels; ++r) {
      const Matrix& tab = value(tables[r]);
      if (tab.cols() != C || indices[i * levels + r] >= tab.rows()) {
        throw ShapeError("embedding_sum: index outside table");
      }
      auto src = tab.row(indices[i * levels + r]);
      for (std::size_t c = 0; c < C; ++c) o[c] += src[c];
    }
  }
  const Id id = push(std::move(out));
  if (record_) {
    nodes_[id].back = [this, id, tabs = std::vector<Id>(tables.begin(), tables.end()),
                       idx = std::vector<std::size_t>(indices.begin(), indices.end()), rows] {
      const Matrix& g = grad_in(id);
      const std::size_t levels = tabs.size();
      for (std::size_t r = 0; r < levels; ++r) {
        Matrix& gt = grad(tabs[r]);
        for (std::size_t i = 0; i < rows; ++i) {
          auto dst = gt.row(idx[i * levels + r]);
          auto src = g.row(i);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
      }
    };
  }
  return id;
}

}  // namespace maskdiff::ad
