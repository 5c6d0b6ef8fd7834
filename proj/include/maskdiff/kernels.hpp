#pragma once

// Dense kernels behind the score network.
//
// Two implementations share one signature set: `serial` is the reference and
// `omp` parallelizes over independent output rows/columns with OpenMP. Every
// output element is reduced in the same order in both, so results are
// bit-identical regardless of thread count. `active` is what the rest of the
// library calls.

#include <span>
#include <vector>

#include "maskdiff/matrix.hpp"

namespace maskdiff::kernels {

/// Per-row statistics saved by normalize_rows for the backward pass.
struct RowStats {
  std::vector<double> inv_std;
  std::vector<char> floored;  // variance was below the floor
};

namespace serial {

/// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a^T * b
void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a * b^T
void matmul_bt_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out[c] += sum over rows of a(r, c)
void column_sums_acc(const Matrix& a, std::span<double> out);
/// Per row: zero mean, unit population std. The variance is floored at var_floor.
void normalize_rows(const Matrix& h, double var_floor, Matrix& xhat, RowStats& stats);
/// dh += Jacobian of normalize_rows applied to dxhat.
void normalize_rows_backward(const Matrix& xhat, const RowStats& stats, const Matrix& dxhat,
                             Matrix& dh);
/// Multi-head bidirectional softmax attention; probs gets one LxL matrix per head.
void attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, Matrix& out,
               std::vector<Matrix>& probs);
/// Accumulates into dq, dk, dv.
void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                        const std::vector<Matrix>& probs, const Matrix& dout, Matrix& dq,
                        Matrix& dk, Matrix& dv);

}  // namespace serial

namespace omp {

/// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a^T * b
void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a * b^T
void matmul_bt_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out[c] += sum over rows of a(r, c)
void column_sums_acc(const Matrix& a, std::span<double> out);
/// Per row: zero mean, unit population std. The variance is floored at var_floor.
void normalize_rows(const Matrix& h, double var_floor, Matrix& xhat, RowStats& stats);
/// dh += Jacobian of normalize_rows applied to dxhat.
void normalize_rows_backward(const Matrix& xhat, const RowStats& stats, const Matrix& dxhat,
                             Matrix& dh);
/// Multi-head bidirectional softmax attention; probs gets one LxL matrix per head.
void attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, Matrix& out,
               std::vector<Matrix>& probs);
/// Accumulates into dq, dk, dv.
void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                        const std::vector<Matrix>& probs, const Matrix& dout, Matrix& dq,
                        Matrix& dk, Matrix& dv);

/// Threads OpenMP will use (1 when built without OpenMP).
int max_threads();

}  // namespace omp

namespace active = omp;

}  // namespace maskdiff::kernels
