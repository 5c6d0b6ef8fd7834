#pragma once

// Toy residual vector quantizer. Level r quantizes whatever the levels before
// it left behind, so a frame is coded as R indices whose centroids sum to its
// reconstruction.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/matrix.hpp"

namespace maskdiff::rvq {

struct Codebooks {
  /// One vocab() x dim() centroid matrix per level.
  std::vector<Matrix> books;
  bool trained = false;

  std::size_t levels() const noexcept { return books.size(); }
  std::size_t vocab() const noexcept { return books.empty() ? 0 : books.front().rows(); }
  std::size_t dim() const noexcept { return books.empty() ? 0 : books.front().cols(); }

  /// Throws InvalidInput on ragged shapes or non-finite centroids.
  void validate() const;

  friend bool operator==(const Codebooks&, const Codebooks&) = default;
};

struct TrainOptions {
  std::size_t levels = 4;
  std::size_t vocab = 16;
  std::size_t iterations = 20;
};

/// Per-level k-means over the running residuals (rows of `frames`). Initial
/// centroids are distinct rows drawn with `rng`; clusters that empty out are
/// re-seeded from the point farthest from its assigned centroid.
/// Throws ConfigError with fewer frames than centroids.
Codebooks train(const Matrix& frames, const TrainOptions& opt, Rng& rng);

/// Index of the nearest row of `centroids` to `x`; ties go to the lowest index.
std::size_t nearest(const Matrix& centroids, std::span<const double> x);

/// Greedy per-level nearest-centroid coding of each row.
TokenGrid encode(const Matrix& frames, const Codebooks& cb);

/// Row i = sum over levels of the selected centroids. Throws InvalidInput on MASK.
Matrix decode(const TokenGrid& tokens, const Codebooks& cb);

/// Entry 0 is the mean squared norm of the frames; entry r (1..R) is the mean
/// squared norm of the residual left once levels 0..r-1 are subtracted.
std::vector<double> residual_energy(const Matrix& frames, const Codebooks& cb);

// Codebook file: magic "MDIFCODE", u32 version, u32 R, u32 n, u32 D,
// then R*n*D f64 centroids, level-major and row-major within a level.
void save(const Codebooks& cb, std::ostream& out);
void save(const Codebooks& cb, const std::filesystem::path& path);
Codebooks load_codebooks(std::istream& in);
Codebooks load_codebooks(const std::filesystem::path& path);

// Frames file: magic "MDIFFRAM", u32 version, u64 count, u32 L, u32 D, then
// count*L*D f64 values. Each sequence is an L x D matrix.
void save_frames(const std::vector<Matrix>& seqs, std::ostream& out);
void save_frames(const std::vector<Matrix>& seqs, const std::filesystem::path& path);
std::vector<Matrix> load_frames(std::istream& in);
std::vector<Matrix> load_frames(const std::filesystem::path& path);

// Token dataset: magic "MDIFTOKS", u32 version, u32 L, u32 R, u32 n,
// u64 count, then count*L*R u16 tokens (grid-major, row-major within a grid).
void save_tokens(const std::vector<TokenGrid>& grids, std::ostream& out);
void save_tokens(const std::vector<TokenGrid>& grids, const std::filesystem::path& path);
std::vector<TokenGrid> load_tokens(std::istream& in);
std::vector<TokenGrid> load_tokens(const std::filesystem::path& path);

/// Stacks the rows of every sequence into one matrix.
Matrix stack_rows(const std::vector<Matrix>& seqs);

}  // namespace maskdiff::rvq
