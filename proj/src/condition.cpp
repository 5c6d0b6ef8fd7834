#include "maskdiff/condition.hpp"

#include <fstream>

#include "maskdiff/io.hpp"

namespace maskdiff {

void ConditionBundle::validate(const ConditionShape& shape) const {
  if (shape.window == 0 || shape.length % shape.window != 0) {
    throw ShapeError("condition: length " + std::to_string(shape.length) +
                     " is not a multiple of the window " + std::to_string(shape.window));
  }
  if (semantic) require_shape(*semantic, shape.length, shape.semantic_dim, "semantic condition");
  if (global_style) require_shape(*global_style, 1, shape.global_dim, "global style condition");
  if (temporal_style) {
    require_shape(*temporal_style, shape.windows(), shape.temporal_dim, "temporal style condition");
  }
}

ConditionBundle apply_mask(const ConditionBundle& cond, const ConditionMask& keep) {
  ConditionBundle out;
  if (keep.semantic) out.semantic = cond.semantic;
  if (keep.global_style) out.global_style = cond.global_style;
  if (keep.temporal_style) out.temporal_style = cond.temporal_style;
  return out;
}

namespace {

constexpr io::Magic kConditionMagic = io::make_magic("MDIFCOND");
constexpr std::uint32_t kConditionVersion = 1;

}  // namespace

void save_conditions(const std::vector<ConditionBundle>& conds, const ConditionShape& shape,
                     std::ostream& out) {
  io::Writer w(out);
  w.header(kConditionMagic, kConditionVersion);
  for (std::size_t v : {shape.length, shape.window, shape.semantic_dim, shape.global_dim,
                        shape.temporal_dim}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u64(conds.size());
  for (const auto& c : conds) {
    c.validate(shape);
    w.u8(static_cast<std::uint8_t>((c.semantic ? 1 : 0) | (c.global_style ? 2 : 0) |
                                   (c.temporal_style ? 4 : 0)));
    for (const auto* m : {&c.semantic, &c.global_style, &c.temporal_style}) {
      if (*m)
        for (double v : (*m)->flat()) w.f64(v);
    }
  }
  w.check();
}

void save_conditions(const std::vector<ConditionBundle>& conds, const ConditionShape& shape,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_conditions(conds, shape, out);
}

std::vector<ConditionBundle> load_conditions(std::istream& in, ConditionShape* shape_out) {
  io::Reader r(in, "condition sidecar");
  if (r.header(kConditionMagic) != kConditionVersion) {
    throw IoError("condition sidecar: unsupported version");
  }
  ConditionShape shape;
  shape.length = r.u32();
  shape.window = r.u32();
  shape.semantic_dim = r.u32();
  shape.global_dim = r.u32();
  shape.temporal_dim = r.u32();
  if (shape.window == 0 || shape.length % shape.window != 0) {
    throw IoError("condition sidecar: invalid length/window");
  }
  const std::uint64_t count = r.u64();
  auto read = [&r](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.flat()) v = r.f64();
    return m;
  };
  std::vector<ConditionBundle> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint8_t flags = r.u8();
    if (flags > 7) throw IoError("condition sidecar: bad presence mask");
    ConditionBundle c;
    if (flags & 1) c.semantic = read(shape.length, shape.semantic_dim);
    if (flags & 2) c.global_style = read(1, shape.global_dim);
    if (flags & 4) c.temporal_style = read(shape.windows(), shape.temporal_dim);
    out.push_back(std::move(c));
  }
  r.expect_end();
  if (shape_out != nullptr) *shape_out = shape;
  return out;
}

std::vector<ConditionBundle> load_conditions(const std::filesystem::path& path,
                                             ConditionShape* shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("file not found: " + path.string());
  return load_conditions(in, shape);
}

}  // namespace maskdiff
