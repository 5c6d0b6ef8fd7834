#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "maskdiff/kernels.hpp"

namespace maskdiff::kernels::omp {
namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::int64_t kParallelWork = 1 << 15;

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  out = Matrix(m, n);
  double* o_base = out.data();
  const double* a_base = a.data();
  const double* b_base = b.data();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t i = 0; i < m; ++i) {
    double* o = o_base + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double s = a_base[i * k + p];
      const double* br = b_base + p * n;
#pragma omp simd
      for (std::int64_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
}

void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_at: row counts differ");
  require_shape(out, a.cols(), b.cols(), "matmul_at output");
  const std::int64_t m = a.cols(), r = a.rows(), n = b.cols();
  double* o_base = out.data();
  const double* a_base = a.data();
  const double* b_base = b.data();
#pragma omp parallel for schedule(static) if (m * r * n > kParallelWork)
  for (std::int64_t i = 0; i < m; ++i) {
    double* o = o_base + i * n;
    for (std::int64_t p = 0; p < r; ++p) {
      const double s = a_base[p * m + i];
      const double* br = b_base + p * n;
#pragma omp simd
      for (std::int64_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
}

void matmul_bt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_bt: column counts differ");
  require_shape(out, a.rows(), b.rows(), "matmul_bt output");
  const std::int64_t m = a.rows(), n = b.rows(), k = a.cols();
  double* o_base = out.data();
  const double* a_base = a.data();
  const double* b_base = b.data();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ar = a_base + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* br = b_base + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      o_base[i * n + j] += acc;
    }
  }
}

void column_sums_acc(const Matrix& a, std::span<double> out) {
  if (out.size() != a.cols()) throw ShapeError("column_sums: size mismatch");
  const std::int64_t rows = a.rows(), cols = a.cols();
  const double* base = a.data();
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::int64_t c = 0; c < cols; ++c) {
    double acc = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) acc += base[r * cols + c];
    out[c] += acc;
  }
}

void normalize_rows(const Matrix& h, double var_floor, Matrix& xhat, RowStats& stats) {
  const std::int64_t rows = h.rows(), cols = h.cols();
  xhat = Matrix(rows, cols);
  stats.inv_std.assign(rows, 0.0);
  stats.floored.assign(rows, 0);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
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
    for (std::int64_t c = 0; c < cols; ++c) out[c] = (in[c] - mean) * inv;
  }
}

void normalize_rows_backward(const Matrix& xhat, const RowStats& stats, const Matrix& dxhat,
                             Matrix& dh) {
  const std::int64_t rows = xhat.rows(), cols = xhat.cols();
  const double inv_n = 1.0 / static_cast<double>(cols);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    auto x = xhat.row(i);
    auto g = dxhat.row(i);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      mean_g += g[c];
      mean_gx += g[c] * x[c];
    }
    mean_g *= inv_n;
    mean_gx *= inv_n;
    if (stats.floored[i]) mean_gx = 0.0;
    const double inv = stats.inv_std[i];
    auto out = dh.row(i);
    for (std::int64_t c = 0; c < cols; ++c) out[c] += inv * (g[c] - mean_g - x[c] * mean_gx);
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
  const std::int64_t nh = static_cast<std::int64_t>(heads);
  const std::int64_t work = static_cast<std::int64_t>(len * len * width);
  // Heads write disjoint column blocks of `out`.
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t h = 0; h < nh; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
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
  const std::int64_t nh = static_cast<std::int64_t>(heads);
  const std::int64_t work = static_cast<std::int64_t>(len * len * width);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t h = 0; h < nh; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const Matrix& p = probs[h];
    Matrix ds(len, len);
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

}  // namespace maskdiff::kernels::omp
