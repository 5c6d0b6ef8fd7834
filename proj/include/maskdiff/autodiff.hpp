#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records each operation with a closure that propagates its output
// gradient to its inputs. Nodes are created in topological order, so backward
// is a single reverse sweep. Parameter leaves reference the caller's storage
// and accumulate their gradient straight into a caller-provided matrix.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "maskdiff/kernels.hpp"
#include "maskdiff/matrix.hpp"

namespace maskdiff::ad {

class Tape {
 public:
  using Id = std::size_t;

  /// With record = false no backward closures or gradients are kept.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Id constant(Matrix value);
  /// Leaf referencing `value`; its gradient accumulates into `grad_target`
  /// (ignored when not recording or null).
  Id param(const Matrix& value, Matrix* grad_target);

  const Matrix& value(Id id) const;

  // --- operations -----------------------------------------------------------
  /// x * w + b, with b a 1 x cols row.
  Id linear(Id x, Id w, Id b);
  Id add(Id a, Id b);
  /// x + row broadcast over rows.
  Id add_row(Id x, Id row);
  /// 1 x C row repeated `rows` times.
  Id broadcast_rows(Id row, std::size_t rows);
  Id concat_cols(Id a, Id b);
  Id slice_cols(Id x, std::size_t begin, std::size_t count);
  Id silu(Id x);
  /// tanh-approximated GELU.
  Id gelu(Id x);
  /// h + alpha (1 x C, per channel) * branch.
  Id gated_residual(Id h, Id branch, Id alpha);
  /// Channel-then-temporal adaptive normalization:
  /// out[i] = gamma_te[i / window] * ((1 + gamma_ch) * norm(h[i]) + beta_ch).
  /// gamma_ch, beta_ch are 1 x C; gamma_te is L' x 1.
  Id dual_ada_ln(Id h, Id gamma_ch, Id beta_ch, Id gamma_te, std::size_t window,
                 double var_floor);
  Id attention(Id q, Id k, Id v, std::size_t heads);
  /// Row i = sum_r tables[r](index(i, r)); `indices` is row-major L x R.
  Id embedding_sum(std::span<const Id> tables, std::span<const std::size_t> indices,
                   std::size_t rows);

  /// Adds `g` to the gradient of `id` before a backward sweep.
  void seed(Id id, const Matrix& g);
  /// Sweeps every recorded node in reverse creation order.
  void backward();
  /// seed(root, g) followed by backward().
  void backward(Id root, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    Matrix* grad_target = nullptr;
    bool has_grad = false;
    std::function<void()> back;
  };

  Id push(Matrix value);
  Matrix& grad(Id id);
  bool has_grad(Id id) const;
  const Matrix& grad_in(Id id) const { return nodes_[id].grad; }

  bool record_;
  std::deque<Node> nodes_;
};

}  // namespace maskdiff::ad
