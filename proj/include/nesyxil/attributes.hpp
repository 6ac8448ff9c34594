#pragma once

// Canonical attribute space of symbolic scenes. The orderings below define
// the column layout of every slot matrix, feedback mask and explanation; any
// reordering breaks stored datasets, checkpoints and feedback files.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace nesyxil {

enum class AttrGroup { kShape = 0, kSize, kColor, kMaterial, kPosition };

inline constexpr std::array<std::string_view, 3> kShapes = {"cube", "sphere", "cylinder"};
inline constexpr std::array<std::string_view, 2> kSizes = {"large", "small"};
inline constexpr std::array<std::string_view, 8> kColors = {
    "gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"};
inline constexpr std::array<std::string_view, 2> kMaterials = {"rubber", "metal"};
inline constexpr std::array<std::string_view, 3> kPositionAxes = {"x", "y", "z"};

// Column offsets of each group inside an encoded object row.
inline constexpr std::size_t kShapeOffset = 0;
inline constexpr std::size_t kSizeOffset = kShapeOffset + kShapes.size();
inline constexpr std::size_t kColorOffset = kSizeOffset + kSizes.size();
inline constexpr std::size_t kMaterialOffset = kColorOffset + kColors.size();
inline constexpr std::size_t kPositionOffset = kMaterialOffset + kMaterials.size();
inline constexpr std::size_t kCategoricalWidth = kPositionOffset;

/// Encoded width D of one object.
inline constexpr std::size_t kObjectWidth = kPositionOffset + kPositionAxes.size();
/// Default slot count K.
inline constexpr std::size_t kDefaultSlots = 10;

static_assert(kObjectWidth == 18);

struct GroupLayout {
  AttrGroup group;
  std::string_view name;
  std::size_t offset;
  std::size_t width;
};

inline constexpr std::array<GroupLayout, 5> kGroups = {{
    {AttrGroup::kShape, "shape", kShapeOffset, kShapes.size()},
    {AttrGroup::kSize, "size", kSizeOffset, kSizes.size()},
    {AttrGroup::kColor, "color", kColorOffset, kColors.size()},
    {AttrGroup::kMaterial, "material", kMaterialOffset, kMaterials.size()},
    {AttrGroup::kPosition, "pos", kPositionOffset, kPositionAxes.size()},
}};

inline constexpr std::array<GroupLayout, 4> kCategoricalGroups = {
    {kGroups[0], kGroups[1], kGroups[2], kGroups[3]}};

inline std::string_view value_name(AttrGroup group, std::size_t index) {
  switch (group) {
    case AttrGroup::kShape: return kShapes.at(index);
    case AttrGroup::kSize: return kSizes.at(index);
    case AttrGroup::kColor: return kColors.at(index);
    case AttrGroup::kMaterial: return kMaterials.at(index);
    case AttrGroup::kPosition: return kPositionAxes.at(index);
  }
  return {};
}

template <std::size_t N>
std::optional<std::size_t> index_of(const std::array<std::string_view, N>& names,
                                    std::string_view value) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == value) return i;
  }
  return std::nullopt;
}

/// Name of column `col` in "group:value" form, e.g. "color:gray" or "pos:x".
inline std::string dim_name(std::size_t col) {
  for (const auto& g : kGroups) {
    if (col >= g.offset && col < g.offset + g.width) {
      return std::string(g.name) + ":" + std::string(value_name(g.group, col - g.offset));
    }
  }
  return {};
}

/// Inverse of dim_name; nullopt for unknown names.
inline std::optional<std::size_t> parse_dim(std::string_view name) {
  for (std::size_t col = 0; col < kObjectWidth; ++col) {
    if (dim_name(col) == name) return col;
  }
  return std::nullopt;
}

}  // namespace nesyxil
