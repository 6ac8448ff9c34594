#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nesyxil/attributes.hpp"
#include "nesyxil/errors.hpp"

namespace nesyxil {

using Rng = std::mt19937_64;

enum class Split { kTrain = 0, kVal, kTest };

inline constexpr std::array<Split, 3> kSplits = {Split::kTrain, Split::kVal, Split::kTest};

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return {};
}

inline Split parse_split(std::string_view name) {
  for (Split s : kSplits) {
    if (split_name(s) == name) return s;
  }
  throw FormatError("unknown split '" + std::string(name) + "'");
}

struct SceneObject {
  std::uint8_t shape = 0;
  std::uint8_t size = 0;
  std::uint8_t color = 0;
  std::uint8_t material = 0;
  std::array<double, 3> pos{0.0, 0.0, 0.0};

  bool valid() const {
    return shape < kShapes.size() && size < kSizes.size() && color < kColors.size() &&
           material < kMaterials.size() &&
           std::all_of(pos.begin(), pos.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
  }

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SymbolicScene {
  std::string id;
  std::vector<SceneObject> objects;
  int class_label = 0;
  Split split = Split::kTrain;
};

// K x D row-major matrix. Rows holding a real object have exactly one 1 per
// categorical group; padding rows are zero.
class SlotMatrix {
 public:
  SlotMatrix() = default;
  explicit SlotMatrix(std::size_t slots, std::size_t width = kObjectWidth)
      : slots_(slots), width_(width), values_(slots * width, 0.0) {}

  std::size_t slots() const { return slots_; }
  std::size_t width() const { return width_; }

  double& operator()(std::size_t k, std::size_t d) { return values_[k * width_ + d]; }
  double operator()(std::size_t k, std::size_t d) const { return values_[k * width_ + d]; }

  std::span<double> row(std::size_t k) { return {values_.data() + k * width_, width_}; }
  std::span<const double> row(std::size_t k) const { return {values_.data() + k * width_, width_}; }

  bool row_is_zero(std::size_t k) const {
    auto r = row(k);
    return std::all_of(r.begin(), r.end(), [](double v) { return v == 0.0; });
  }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  friend bool operator==(const SlotMatrix&, const SlotMatrix&) = default;

 private:
  std::size_t slots_ = 0;
  std::size_t width_ = kObjectWidth;
  std::vector<double> values_;
};

inline std::array<double, kObjectWidth> encode_object(const SceneObject& obj) {
  std::array<double, kObjectWidth> out{};
  out[kShapeOffset + obj.shape] = 1.0;
  out[kSizeOffset + obj.size] = 1.0;
  out[kColorOffset + obj.color] = 1.0;
  out[kMaterialOffset + obj.material] = 1.0;
  std::copy(obj.pos.begin(), obj.pos.end(), out.begin() + kPositionOffset);
  return out;
}

/// Places the scene's objects into `slots` rows in a uniformly random order
/// drawn from `rng`; unused rows stay zero.
inline SlotMatrix encode_scene(const SymbolicScene& scene, std::size_t slots, Rng& rng) {
  if (scene.objects.size() > slots) {
    throw SceneTooLarge("scene '" + scene.id + "' has " + std::to_string(scene.objects.size()) +
                        " objects but only " + std::to_string(slots) + " slots");
  }
  std::vector<std::size_t> order(slots);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  SlotMatrix z(slots);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    auto enc = encode_object(scene.objects[i]);
    std::copy(enc.begin(), enc.end(), z.row(order[i]).begin());
  }
  return z;
}

/// Replaces each categorical group of every nonzero row by a one-hot at its
/// argmax (ties toward the lowest index). Positions are left untouched.
inline SlotMatrix binarize(const SlotMatrix& z) {
  SlotMatrix out = z;
  for (std::size_t k = 0; k < z.slots(); ++k) {
    if (z.row_is_zero(k)) continue;
    for (const auto& g : kCategoricalGroups) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < g.width; ++i) {
        if (z(k, g.offset + i) > z(k, g.offset + best)) best = i;
      }
      for (std::size_t i = 0; i < g.width; ++i) out(k, g.offset + i) = (i == best) ? 1.0 : 0.0;
    }
  }
  return out;
}

/// Reads an object back from a binarized row.
inline SceneObject decode_row(std::span<const double> row) {
  auto argmax = [&](std::size_t offset, std::size_t width) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < width; ++i) {
      if (row[offset + i] > row[offset + best]) best = i;
    }
    return static_cast<std::uint8_t>(best);
  };
  SceneObject obj;
  obj.shape = argmax(kShapeOffset, kShapes.size());
  obj.size = argmax(kSizeOffset, kSizes.size());
  obj.color = argmax(kColorOffset, kColors.size());
  obj.material = argmax(kMaterialOffset, kMaterials.size());
  for (std::size_t a = 0; a < 3; ++a) obj.pos[a] = row[kPositionOffset + a];
  return obj;
}

}  // namespace nesyxil
