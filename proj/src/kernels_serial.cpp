#include <cmath>

#include "maskdiff/kernels.hpp"

namespace maskdiff::kernels::serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  out = Matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a(i, p);
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
}

void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_at: row counts differ");
  require_shape(out, a.cols(), b.cols(), "matmul_at output");
  const std::size_t m = a.cols(), r = a.rows(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < r; ++p) {
      const double s = a(p, i);
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
}

void matmul_bt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_bt: column counts differ");
  require_shape(out, a.rows(), b.rows(), "matmul_bt output");
  const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out(i, j) += acc;
    }
  }
}

void column_sums_acc(const Matrix& a, std::span<double> out) {
  if (out.size() != a.cols()) throw ShapeError("column_sums: size mismatch");
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) acc += a(r, c);
    out[c] += acc;
  }
}

void normalize_rows(const Matrix& h, double var_floor, Matrix& xhat, RowStats& stats) {
  const std::size_t rows = h.rows(), cols = h.cols();
  xhat = Matrix(rows, cols);
  stats.inv_std.assign(rows, 0.0);
  stats.floored.assign(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    auto in = h.row(i);
    double mean = 0.0;
    for (double x : in) mean += x;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double x : in) var += (x - mean) * (x - mean);
    var /= static_cast<double>(cols);
    if (var < var_floor) {
      var = var_floor;
      stats.floored[i] = 1;
    }
    const double inv = 1.0 / std::sqrt(var);
    stats.inv_std[i] = inv;
    auto out = xhat.row(i);
    for (std::size_t c = 0; c < cols; ++c) out[c] = (in[c] - mean) * inv;
  }
}

void normalize_rows_backward(const Matrix& xhat, const RowStats& stats, const Matrix& dxhat,
                             Matrix& dh) {
  const std::size_t rows = xhat.rows(), cols = xhat.cols();
  const double inv_n = 1.0 / static_cast<double>(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto x = xhat.row(i);
    auto g = dxhat.row(i);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      mean_g += g[c];
      mean_gx += g[c] * x[c];
    }
    mean_g *= inv_n;
    mean_gx *= inv_n;
    // A floored row divides by a constant, so only the centering term remains.
    if (stats.floored[i]) mean_gx = 0.0;
    const double inv = stats.inv_std[i];
    auto out = dh.row(i);
    for (std::size_t c = 0; c < cols; ++c) out[c] += inv * (g[c] - mean_g - x[c] * mean_gx);
  }
}

void attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, Matrix& out,
               std::vector<Matrix>& probs) {
  const std::size_t len = q.rows(), width = q.cols();
  if (heads == 0 || width % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  out = Matrix(len, width);
  probs.assign(heads, Matrix(len, len));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Matrix& p = probs[h];
    for (std::size_t i = 0; i < len; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += q(i, off + d) * k(j, off + d);
        s *= scale;
        p(i, j) = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j < len; ++j) p(i, j) /= z;
      for (std::size_t j = 0; j < len; ++j) {
        const double w = p(i, j);
        for (std::size_t d = 0; d < dh; ++d) out(i, off + d) += w * v(j, off + d);
      }
    }
  }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                        const std::vector<Matrix>& probs, const Matrix& dout, Matrix& dq,
                        Matrix& dk, Matrix& dv) {
  const std::size_t len = q.rows(), width = q.cols();
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix ds(len, len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Matrix& p = probs[h];
    for (std::size_t i = 0; i < len; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        double dp = 0.0;
        for (std::size_t d = 0; d < dh; ++d) dp += dout(i, off + d) * v(j, off + d);
        ds(i, j) = dp;
        dot += dp * p(i, j);
      }
      for (std::size_t j = 0; j < len; ++j) ds(i, j) = p(i, j) * (ds(i, j) - dot) * scale;
    }
    for (std::size_t j = 0; j < len; ++j) {
      for (std::size_t i = 0; i < len; ++i) {
        const double w = p(i, j);
        const double s = ds(i, j);
        for (std::size_t d = 0; d < dh; ++d) {
          dv(j, off + d) += w * dout(i, off + d);
          dk(j, off + d) += s * q(i, off + d);
        }
      }
    }
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        const double s = ds(i, j);
        for (std::size_t d = 0; d < dh; ++d) dq(i, off + d) += s * k(j, off + d);
      }
    }
  }
}

}  // namespace maskdiff::kernels::serial
