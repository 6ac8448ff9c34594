#pragma once

// Declarative class rules over symbolic scenes and an injective matcher.
//
// A rule is a list of object patterns (each demanding `min_count` distinct
// objects) plus binary spatial relations between pattern groups. A scene
// satisfies a rule when distinct objects can be assigned to every demand such
// that all relations hold. Mixture rules carry an alternative branch and are
// satisfied when either branch is.

#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nesyxil/attributes.hpp"
#include "nesyxil/errors.hpp"
#include "nesyxil/scene.hpp"

namespace nesyxil {

enum class Region { kNone = 0, kLeftHalf, kRightHalf };

struct ObjectPattern {
  std::optional<std::uint8_t> shape;
  std::optional<std::uint8_t> size;
  std::optional<std::uint8_t> color;
  std::optional<std::uint8_t> material;
  Region region = Region::kNone;
  int min_count = 1;

  bool has_constraint() const {
    return shape || size || color || material || region != Region::kNone;
  }

  /// Encoded columns named by this pattern's attribute constraints. A region
  /// constraint names the x column.
  std::vector<std::size_t> constrained_dims() const {
    std::vector<std::size_t> dims;
    if (shape) dims.push_back(kShapeOffset + *shape);
    if (size) dims.push_back(kSizeOffset + *size);
    if (color) dims.push_back(kColorOffset + *color);
    if (material) dims.push_back(kMaterialOffset + *material);
    if (region != Region::kNone) dims.push_back(kPositionOffset);
    return dims;
  }

  friend bool operator==(const ObjectPattern&, const ObjectPattern&) = default;
};

enum class RelationKind { kInFrontOf };

struct Relation {
  std::size_t a = 0;
  std::size_t b = 0;
  RelationKind kind = RelationKind::kInFrontOf;
  friend bool operator==(const Relation&, const Relation&) = default;
};

struct ClassRule {
  std::vector<ObjectPattern> clauses;
  std::vector<Relation> relations;
  // Alternative branch and the probability with which generators draw it.
  std::shared_ptr<const ClassRule> alt;
  double alt_probability = 0.0;

  /// Number of distinct objects the primary branch needs.
  int required_objects() const {
    int n = 0;
    for (const auto& c : clauses) n += c.min_count;
    return n;
  }

  void validate() const {
    for (const auto& c : clauses) {
      if (!c.has_constraint()) throw FormatError("object pattern without constraints");
      if (c.min_count < 1) throw FormatError("object pattern min_count must be >= 1");
    }
    for (const auto& r : relations) {
      if (r.a >= clauses.size() || r.b >= clauses.size()) {
        throw FormatError("relation references a missing clause");
      }
    }
    if (alt) {
      if (!(alt_probability > 0.0 && alt_probability < 1.0)) {
        throw FormatError("mixture probability must lie in (0,1)");
      }
      alt->validate();
    }
  }

  friend bool operator==(const ClassRule& l, const ClassRule& r) {
    if (l.clauses != r.clauses || l.relations != r.relations ||
        l.alt_probability != r.alt_probability || bool(l.alt) != bool(r.alt)) {
      return false;
    }
    return !l.alt || *l.alt == *r.alt;
  }
};

/// Depth semantics: smaller z is closer to the viewer.
inline bool in_front_of(const SceneObject& a, const SceneObject& b) {
  return a.pos[2] < b.pos[2];
}

inline bool relation_holds(RelationKind kind, const SceneObject& a, const SceneObject& b) {
  switch (kind) {
    case RelationKind::kInFrontOf: return in_front_of(a, b);
  }
  return false;
}

inline bool matches_pattern(const SceneObject& obj, const ObjectPattern& p) {
  if (p.shape && obj.shape != *p.shape) return false;
  if (p.size && obj.size != *p.size) return false;
  if (p.color && obj.color != *p.color) return false;
  if (p.material && obj.material != *p.material) return false;
  switch (p.region) {
    case Region::kNone: break;
    case Region::kLeftHalf:
      if (!(obj.pos[0] < 0.5)) return false;
      break;
    case Region::kRightHalf:
      if (!(obj.pos[0] >= 0.5)) return false;
      break;
  }
  return true;
}

struct Assignment {
  // objects[c] holds the indices of the objects serving clause c.
  std::vector<std::vector<std::size_t>> objects;
  // 0 for the primary branch, 1 when matched through the alternative.
  int branch = 0;

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

namespace detail {

class Matcher {
 public:
  Matcher(std::span<const SceneObject> objs, const ClassRule& rule) : objs_(objs), rule_(rule) {
    for (std::size_t c = 0; c < rule.clauses.size(); ++c) {
      for (int i = 0; i < rule.clauses[c].min_count; ++i) demands_.push_back(c);
    }
    chosen_.assign(demands_.size(), 0);
    used_.assign(objs.size(), false);
  }

  std::optional<Assignment> run() {
    if (demands_.size() > objs_.size()) return std::nullopt;
    if (!search(0)) return std::nullopt;
    Assignment a;
    a.objects.resize(rule_.clauses.size());
    for (std::size_t d = 0; d < demands_.size(); ++d) a.objects[demands_[d]].push_back(chosen_[d]);
    return a;
  }

 private:
  bool consistent(std::size_t d) const {
    const std::size_t clause = demands_[d];
    const SceneObject& obj = objs_[chosen_[d]];
    for (std::size_t e = 0; e < d; ++e) {
      const SceneObject& other = objs_[chosen_[e]];
      for (const auto& r : rule_.relations) {
        if (r.a == clause && r.b == demands_[e] && !relation_holds(r.kind, obj, other)) return false;
        if (r.b == clause && r.a == demands_[e] && !relation_holds(r.kind, other, obj)) return false;
      }
    }
    return true;
  }

  bool search(std::size_t d) {
    if (d == demands_.size()) return true;
    const ObjectPattern& p = rule_.clauses[demands_[d]];
    // Demands of the same clause are interchangeable; taking their objects in
    // increasing index order skips permutations of one set.
    std::size_t start = (d > 0 && demands_[d - 1] == demands_[d]) ? chosen_[d - 1] + 1 : 0;
    for (std::size_t i = start; i < objs_.size(); ++i) {
      if (used_[i] || !matches_pattern(objs_[i], p)) continue;
      chosen_[d] = i;
      if (!consistent(d)) continue;
      used_[i] = true;
      if (search(d + 1)) return true;
      used_[i] = false;
    }
    return false;
  }

  std::span<const SceneObject> objs_;
  const ClassRule& rule_;
  std::vector<std::size_t> demands_;
  std::vector<std::size_t> chosen_;
  std::vector<bool> used_;
};

}  // namespace detail

/// First injective assignment found by index-ordered backtracking, or nullopt.
inline std::optional<Assignment> satisfies_rule(std::span<const SceneObject> objects,
                                                const ClassRule& rule) {
  if (auto a = detail::Matcher(objects, rule).run()) return a;
  if (rule.alt) {
    if (auto a = detail::Matcher(objects, *rule.alt).run()) {
      a->branch = 1;
      return a;
    }
  }
  return std::nullopt;
}

/// Like satisfies_rule, but reports the alternative branch whenever it holds.
/// Generated mixture scenes satisfy the alternative only if drawn from it.
inline std::optional<Assignment> drawn_branch(std::span<const SceneObject> objects, const ClassRule& rule) {
  if (rule.alt) {
    if (auto a = detail::Matcher(objects, *rule.alt).run()) {
      a->branch = 1;
      return a;
    }
  }
  return detail::Matcher(objects, rule).run();
}

inline std::optional<Assignment> satisfies_rule(const SymbolicScene& scene, const ClassRule& rule) {
  return satisfies_rule(std::span<const SceneObject>(scene.objects), rule);
}

inline std::string describe(const ObjectPattern& p) {
  std::ostringstream os;
  os << "[";
  const char* sep = "";
  auto put = [&](const char* key, std::string_view v) {
    os << sep << key << "=" << v;
    sep = " ";
  };
  if (p.size) put("size", kSizes[*p.size]);
  if (p.color) put("color", kColors[*p.color]);
  if (p.material) put("material", kMaterials[*p.material]);
  if (p.shape) put("shape", kShapes[*p.shape]);
  if (p.region == Region::kLeftHalf) put("region", "left_half");
  if (p.region == Region::kRightHalf) put("region", "right_half");
  os << "]";
  if (p.min_count > 1) os << "x" << p.min_count;
  return os.str();
}

inline std::string describe(const ClassRule& rule) {
  std::ostringstream os;
  for (std::size_t i = 0; i < rule.clauses.size(); ++i) {
    if (i) os << " & ";
    os << describe(rule.clauses[i]);
  }
  for (const auto& r : rule.relations) os << " & #" << r.a << " in_front_of #" << r.b;
  if (rule.alt) os << " | p=" << rule.alt_probability << ": " << describe(*rule.alt);
  return os.str();
}

}  // namespace nesyxil
