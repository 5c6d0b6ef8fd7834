#include "maskdiff/rvq.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "maskdiff/io.hpp"

namespace maskdiff::rvq {
namespace {

constexpr io::Magic kCodebookMagic = io::make_magic("MDIFCODE");
constexpr io::Magic kFramesMagic = io::make_magic("MDIFFRAM");
constexpr io::Magic kTokensMagic = io::make_magic("MDIFTOKS");
constexpr std::uint32_t kVersion = 1;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

bool same_row(std::span<const double> a, std::span<const double> b) {
  return std::equal(a.begin(), a.end(), b.begin());
}

// Distinct rows first (in random order), duplicates only once those run out.
Matrix initial_centroids(const Matrix& data, std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);

  std::vector<std::size_t> chosen, skipped;
  for (std::size_t idx : order) {
    if (chosen.size() == n) break;
    bool dup = false;
    for (std::size_t c : chosen) dup = dup || same_row(data.row(c), data.row(idx));
    (dup ? skipped : chosen).push_back(idx);
  }
  for (std::size_t k = 0; chosen.size() < n; ++k) chosen.push_back(skipped[k]);

  Matrix c(n, data.cols());
  for (std::size_t k = 0; k < n; ++k) {
    auto src = data.row(chosen[k]);
    std::copy(src.begin(), src.end(), c.row(k).begin());
  }
  return c;
}

Matrix kmeans(const Matrix& data, std::size_t n, std::size_t iterations, Rng& rng) {
  Matrix cent = initial_centroids(data, n, rng);
  const std::size_t N = data.rows(), D = data.cols();
  std::vector<std::size_t> assign(N);
  std::vector<double> dist(N);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < N; ++i) {
      assign[i] = nearest(cent, data.row(i));
      dist[i] = sq_dist(data.row(i), cent.row(assign[i]));
    }
    Matrix sums(n, D);
    std::vector<std::size_t> counts(n, 0);
    for (std::size_t i = 0; i < N; ++i) {
      auto dst = sums.row(assign[i]);
      auto src = data.row(i);
      for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
      ++counts[assign[i]];
    }
    std::vector<char> taken(N, 0);
    for (std::size_t k = 0; k < n; ++k) {
      if (counts[k] > 0) {
        auto dst = cent.row(k);
        auto src = sums.row(k);
        for (std::size_t d = 0; d < D; ++d) dst[d] = src[d] / static_cast<double>(counts[k]);
        continue;
      }
      // Empty cluster: move it onto the worst-served point not used yet.
      std::size_t far = N;
      for (std::size_t i = 0; i < N; ++i) {
        if (!taken[i] && dist[i] > 0.0 && (far == N || dist[i] > dist[far])) far = i;
      }
      if (far == N) continue;
      taken[far] = 1;
      auto src = data.row(far);
      std::copy(src.begin(), src.end(), cent.row(k).begin());
    }
  }
  return cent;
}

void check_frames(const Matrix& frames, const Codebooks& cb, const char* what) {
  if (cb.levels() == 0) throw InvalidInput(std::string(what) + ": codebooks are empty");
  if (frames.cols() != cb.dim()) {
    throw ShapeError(std::string(what) + ": frame dimension " + std::to_string(frames.cols()) +
                     " does not match codebook dimension " + std::to_string(cb.dim()));
  }
}

}  // namespace

void Codebooks::validate() const {
  if (books.empty()) throw InvalidInput("codebooks: no levels");
  for (const auto& b : books) {
    if (!b.same_shape(books.front())) throw InvalidInput("codebooks: ragged level shapes");
    for (double v : b.flat())
      if (!std::isfinite(v)) throw InvalidInput("codebooks: non-finite centroid");
  }
  if (vocab() == 0 || vocab() >= kMask) throw InvalidInput("codebooks: bad vocabulary size");
}

std::size_t nearest(const Matrix& centroids, std::span<const double> x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows(); ++k) {
    const double d = sq_dist(centroids.row(k), x);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Codebooks train(const Matrix& frames, const TrainOptions& opt, Rng& rng) {
  if (opt.levels == 0 || opt.vocab == 0 || opt.vocab >= kMask) {
    throw ConfigError("rvq: levels and vocab must be positive (vocab < 65535)");
  }
  if (frames.rows() < opt.vocab) {
    throw ConfigError("rvq: need at least " + std::to_string(opt.vocab) + " frames, got " +
                      std::to_string(frames.rows()));
  }
  for (double v : frames.flat())
    if (!std::isfinite(v)) throw InvalidInput("rvq: non-finite frame value");

  Codebooks cb;
  Matrix residual = frames;
  for (std::size_t r = 0; r < opt.levels; ++r) {
    Matrix cent = kmeans(residual, opt.vocab, opt.iterations, rng);
    for (std::size_t i = 0; i < residual.rows(); ++i) {
      auto row = residual.row(i);
      auto c = cent.row(nearest(cent, row));
      for (std::size_t d = 0; d < row.size(); ++d) row[d] -= c[d];
    }
    cb.books.push_back(std::move(cent));
  }
  cb.trained = true;
  return cb;
}

TokenGrid encode(const Matrix& frames, const Codebooks& cb) {
  check_frames(frames, cb, "encode");
  if (!cb.trained) throw InvalidInput("encode: codebooks are not trained");
  TokenGrid out(frames.rows(), cb.levels(), cb.vocab());
  std::vector<double> res(frames.cols());
  for (std::size_t i = 0; i < frames.rows(); ++i) {
    auto src = frames.row(i);
    std::copy(src.begin(), src.end(), res.begin());
    for (std::size_t r = 0; r < cb.levels(); ++r) {
      const std::size_t k = nearest(cb.books[r], res);
      out.at(i, r) = static_cast<Token>(k);
      auto c = cb.books[r].row(k);
      for (std::size_t d = 0; d < res.size(); ++d) res[d] -= c[d];
    }
  }
  return out;
}

Matrix decode(const TokenGrid& tokens, const Codebooks& cb) {
  if (tokens.levels() != cb.levels() || tokens.vocab() != cb.vocab()) {
    throw ShapeError("decode: token grid does not match the codebooks");
  }
  Matrix out(tokens.length(), cb.dim());
  for (std::size_t i = 0; i < tokens.length(); ++i) {
    auto dst = out.row(i);
    for (std::size_t r = 0; r < cb.levels(); ++r) {
      if (tokens.masked(i, r)) throw InvalidInput("decode: grid contains MASK");
      if (tokens.at(i, r) >= cb.vocab()) throw InvalidInput("decode: token out of range");
      auto c = cb.books[r].row(tokens.at(i, r));
      for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += c[d];
    }
  }
  return out;
}

std::vector<double> residual_energy(const Matrix& frames, const Codebooks& cb) {
  check_frames(frames, cb, "residual_energy");
  const double count = static_cast<double>(std::max<std::size_t>(frames.rows(), 1));
  std::vector<double> energy(cb.levels() + 1, 0.0);
  Matrix res = frames;
  for (double v : res.flat()) energy[0] += v * v;
  for (std::size_t r = 0; r < cb.levels(); ++r) {
    for (std::size_t i = 0; i < res.rows(); ++i) {
      auto row = res.row(i);
      auto c = cb.books[r].row(nearest(cb.books[r], row));
      for (std::size_t d = 0; d < row.size(); ++d) {
        row[d] -= c[d];
        energy[r + 1] += row[d] * row[d];
      }
    }
  }
  for (double& e : energy) e /= count;
  return energy;
}

Matrix stack_rows(const std::vector<Matrix>& seqs) {
  std::size_t rows = 0;
  const std::size_t cols = seqs.empty() ? 0 : seqs.front().cols();
  for (const auto& s : seqs) {
    if (s.cols() != cols) throw ShapeError("stack_rows: ragged frame dimensions");
    rows += s.rows();
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const auto& s : seqs) {
    std::copy(s.data(), s.data() + s.size(), out.data() + at * cols);
    at += s.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

void save(const Codebooks& cb, std::ostream& out) {
  cb.validate();
  io::Writer w(out);
  w.header(kCodebookMagic, kVersion);
  w.u32(static_cast<std::uint32_t>(cb.levels()));
  w.u32(static_cast<std::uint32_t>(cb.vocab()));
  w.u32(static_cast<std::uint32_t>(cb.dim()));
  for (const auto& b : cb.books)
    for (double v : b.flat()) w.f64(v);
  w.check();
}

Codebooks load_codebooks(std::istream& in) {
  io::Reader r(in, "codebook");
  if (r.header(kCodebookMagic) != kVersion) throw IoError("codebook: unsupported version");
  const std::size_t R = r.u32(), n = r.u32(), D = r.u32();
  if (R == 0 || n == 0 || D == 0) throw IoError("codebook: empty shape");
  Codebooks cb;
  for (std::size_t l = 0; l < R; ++l) {
    Matrix m(n, D);
    for (double& v : m.flat()) v = r.f64();
    cb.books.push_back(std::move(m));
  }
  r.expect_end();
  cb.trained = true;
  cb.validate();
  return cb;
}

void save_frames(const std::vector<Matrix>& seqs, std::ostream& out) {
  io::Writer w(out);
  w.header(kFramesMagic, kVersion);
  const std::size_t L = seqs.empty() ? 0 : seqs.front().rows();
  const std::size_t D = seqs.empty() ? 0 : seqs.front().cols();
  w.u64(seqs.size());
  w.u32(static_cast<std::uint32_t>(L));
  w.u32(static_cast<std::uint32_t>(D));
  for (const auto& s : seqs) {
    require_shape(s, L, D, "save_frames");
    for (double v : s.flat()) w.f64(v);
  }
  w.check();
}

std::vector<Matrix> load_frames(std::istream& in) {
  io::Reader r(in, "frames");
  if (r.header(kFramesMagic) != kVersion) throw IoError("frames: unsupported version");
  const std::uint64_t count = r.u64();
  const std::size_t L = r.u32(), D = r.u32();
  std::vector<Matrix> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    Matrix m(L, D);
    for (double& v : m.flat()) v = r.f64();
    out.push_back(std::move(m));
  }
  r.expect_end();
  return out;
}

void save_tokens(const std::vector<TokenGrid>& grids, std::ostream& out) {
  io::Writer w(out);
  w.header(kTokensMagic, kVersion);
  const TokenGrid shape = grids.empty() ? TokenGrid() : grids.front();
  w.u32(static_cast<std::uint32_t>(shape.length()));
  w.u32(static_cast<std::uint32_t>(shape.levels()));
  w.u32(static_cast<std::uint32_t>(shape.vocab()));
  w.u64(grids.size());
  for (const auto& g : grids) {
    if (g.length() != shape.length() || g.levels() != shape.levels() ||
        g.vocab() != shape.vocab()) {
      throw ShapeError("save_tokens: grids differ in shape");
    }
    for (Token t : g.tokens()) w.u16(t);
  }
  w.check();
}

std::vector<TokenGrid> load_tokens(std::istream& in) {
  io::Reader r(in, "token dataset");
  if (r.header(kTokensMagic) != kVersion) throw IoError("token dataset: unsupported version");
  const std::size_t L = r.u32(), R = r.u32(), n = r.u32();
  const std::uint64_t count = r.u64();
  std::vector<TokenGrid> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    TokenGrid g(L, R, n);
    for (Token& t : g.tokens()) t = r.u16();
    try {
      g.validate();
    } catch (const InvalidInput& e) {
      throw IoError(std::string("token dataset: ") + e.what());
    }
    out.push_back(std::move(g));
  }
  r.expect_end();
  return out;
}

namespace {

template <class T, class Fn>
void write_file(const std::filesystem::path& path, const T& value, Fn fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  fn(value, out);
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("file not found: " + path.string());
  return in;
}

}  // namespace

void save(const Codebooks& cb, const std::filesystem::path& path) {
  write_file(path, cb, [](const Codebooks& c, std::ostream& o) { save(c, o); });
}
Codebooks load_codebooks(const std::filesystem::path& path) {
  auto in = open_in(path);
  return load_codebooks(in);
}
void save_frames(const std::vector<Matrix>& seqs, const std::filesystem::path& path) {
  write_file(path, seqs, [](const std::vector<Matrix>& s, std::ostream& o) { save_frames(s, o); });
}
std::vector<Matrix> load_frames(const std::filesystem::path& path) {
  auto in = open_in(path);
  return load_frames(in);
}
void save_tokens(const std::vector<TokenGrid>& grids, const std::filesystem::path& path) {
  write_file(path, grids,
             [](const std::vector<TokenGrid>& g, std::ostream& o) { save_tokens(g, o); });
}
std::vector<TokenGrid> load_tokens(const std::filesystem::path& path) {
  auto in = open_in(path);
  return load_tokens(in);
}

}  // namespace maskdiff::rvq
