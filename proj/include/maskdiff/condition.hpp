#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "maskdiff/matrix.hpp"

namespace maskdiff {

/// Declared sizes of the three condition streams for a length-L grid.
struct ConditionShape {
  std::size_t length = 0;          // L
  std::size_t window = 1;          // U, frames per temporal-style window
  std::size_t semantic_dim = 0;    // C_sem
  std::size_t global_dim = 0;      // C_id
  std::size_t temporal_dim = 0;    // C_emo

  std::size_t windows() const { return window == 0 ? 0 : length / window; }  // L'
};

/// Conditioning inputs. Any slot may be null, in which case the network
/// substitutes its learned null embedding.
struct ConditionBundle {
  std::optional<Matrix> semantic;        // L x C_sem
  std::optional<Matrix> global_style;    // 1 x C_id
  std::optional<Matrix> temporal_style;  // L' x C_emo

  /// Throws ShapeError when a present slot disagrees with `shape`, or when L is
  /// not a multiple of U.
  void validate(const ConditionShape& shape) const;

  static ConditionBundle null() { return {}; }

  friend bool operator==(const ConditionBundle&, const ConditionBundle&) = default;
};

/// Which slots to keep when deriving a partially-null bundle.
struct ConditionMask {
  bool semantic = true;
  bool global_style = true;
  bool temporal_style = true;

  static ConditionMask all() { return {}; }
  static ConditionMask none() { return {false, false, false}; }
};

ConditionBundle apply_mask(const ConditionBundle& cond, const ConditionMask& keep);

// Condition sidecar file: magic "MDIFCOND", u32 version, u32 L, u32 U,
// u32 C_sem, u32 C_id, u32 C_emo, u64 count; then per bundle one u8 presence
// mask (bit 0 semantic, bit 1 global, bit 2 temporal) followed by the present
// matrices as row-major f64 in that order.
void save_conditions(const std::vector<ConditionBundle>& conds, const ConditionShape& shape,
                     std::ostream& out);
void save_conditions(const std::vector<ConditionBundle>& conds, const ConditionShape& shape,
                     const std::filesystem::path& path);
std::vector<ConditionBundle> load_conditions(std::istream& in, ConditionShape* shape = nullptr);
std::vector<ConditionBundle> load_conditions(const std::filesystem::path& path,
                                             ConditionShape* shape = nullptr);

}  // namespace maskdiff
