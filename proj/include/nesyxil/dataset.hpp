#pragma once

// Confounded CLEVR-Hans symbolic dataset generation.
//
// Every class has a true rule and one rule per split; in confounded classes
// the train/val rule adds a constraint (the confounder) that the test rule
// drops. Scenes are rejection-sampled until they satisfy no other class's
// rule of the same split, so in train/val the confounded combination is the
// only thing that separates a class from its neighbours.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>

#include "nesyxil/attributes.hpp"
#include "nesyxil/errors.hpp"
#include "nesyxil/rules.hpp"
#include "nesyxil/scene.hpp"

namespace nesyxil {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kMinObjects = 3;
inline constexpr int kMaxObjects = 10;
inline constexpr const char* kFormatVersion = "1";

struct ClassSpec {
  ClassRule true_rule;
  std::array<ClassRule, 3> rule_per_split;  // indexed by Split

  const ClassRule& rule(Split s) const { return rule_per_split[static_cast<std::size_t>(s)]; }
  bool confounded() const { return !(rule(Split::kTrain) == true_rule); }
};

struct DatasetSpec {
  std::string name;
  std::vector<ClassSpec> classes;
  std::array<int, 3> per_class_counts{500, 150, 150};
  std::uint64_t seed = 0;
  double min_separation = 0.08;
  int retry_budget = 1000;

  int count(Split s) const { return per_class_counts[static_cast<std::size_t>(s)]; }
};

enum class Scale { kFull, kDesk };

inline std::array<int, 3> preset_counts(Scale scale) {
  return scale == Scale::kFull ? std::array<int, 3>{3000, 750, 750}
                               : std::array<int, 3>{500, 150, 150};
}

namespace patterns {

struct P {
  ObjectPattern p;
  P& shape(std::string_view v) { p.shape = static_cast<std::uint8_t>(*index_of(kShapes, v)); return *this; }
  P& size(std::string_view v) { p.size = static_cast<std::uint8_t>(*index_of(kSizes, v)); return *this; }
  P& color(std::string_view v) { p.color = static_cast<std::uint8_t>(*index_of(kColors, v)); return *this; }
  P& material(std::string_view v) { p.material = static_cast<std::uint8_t>(*index_of(kMaterials, v)); return *this; }
  P& left() { p.region = Region::kLeftHalf; return *this; }
  P& right() { p.region = Region::kRightHalf; return *this; }
  P& count(int n) { p.min_count = n; return *this; }
  operator ObjectPattern() const { return p; }  // NOLINT
};

inline ClassSpec unconfounded(ClassRule rule) {
  return ClassSpec{rule, {rule, rule, rule}};
}

inline ClassSpec confounded(ClassRule truth, ClassRule conf) {
  return ClassSpec{truth, {conf, conf, truth}};
}

// CLEVR-Hans3 classes, shared with CLEVR-Hans7 (its classes 1, 2 and 7).
inline ClassSpec large_cube_large_cylinder() {
  ClassRule truth{{P().size("large").shape("cube"), P().size("large").shape("cylinder")}, {}, {}, 0.0};
  ClassRule conf{{P().size("large").shape("cube").color("gray"), P().size("large").shape("cylinder")},
                 {}, {}, 0.0};
  return confounded(truth, conf);
}

inline ClassSpec small_sphere_small_metal_cube() {
  ClassRule truth{{P().size("small").shape("sphere"), P().size("small").material("metal").shape("cube")},
                  {}, {}, 0.0};
  ClassRule conf{{P().size("small").material("metal").shape("sphere"),
                  P().size("small").material("metal").shape("cube")},
                 {}, {}, 0.0};
  return confounded(truth, conf);
}

inline ClassSpec large_blue_sphere_small_yellow_sphere() {
  return unconfounded(ClassRule{
      {P().size("large").color("blue").shape("sphere"), P().size("small").color("yellow").shape("sphere")},
      {}, {}, 0.0});
}

}  // namespace patterns

inline DatasetSpec clevr_hans3_spec(Scale scale = Scale::kDesk, std::uint64_t seed = 0) {
  using namespace patterns;
  DatasetSpec spec;
  spec.name = "ch3";
  spec.classes = {large_cube_large_cylinder(), small_sphere_small_metal_cube(),
                  large_blue_sphere_small_yellow_sphere()};
  spec.per_class_counts = preset_counts(scale);
  spec.seed = seed;
  return spec;
}

inline DatasetSpec clevr_hans7_spec(Scale scale = Scale::kDesk, std::uint64_t seed = 0) {
  using namespace patterns;
  DatasetSpec spec;
  spec.name = "ch7";

  // Cyan object in front of two red objects; a small cyan cube in train/val.
  ClassRule cyan_truth{{P().color("cyan"), P().color("red").count(2)}, {{0, 1, RelationKind::kInFrontOf}}, {}, 0.0};
  ClassRule cyan_conf{{P().color("cyan").size("small").shape("cube"), P().color("red").count(2)},
                      {{0, 1, RelationKind::kInFrontOf}}, {}, 0.0};

  // At least five small objects, among them a green, a brown and a purple one.
  ClassRule five_small{{P().size("small").color("green"), P().size("small").color("brown"),
                        P().size("small").color("purple"), P().size("small").count(2)},
                       {}, {}, 0.0};

  ObjectPattern spheres_left = P().shape("sphere").left().count(3);
  ObjectPattern metal_cylinders_right = P().material("metal").shape("cylinder").right().count(3);

  auto both_halves = std::make_shared<ClassRule>(ClassRule{{spheres_left, metal_cylinders_right}, {}, {}, 0.0});
  ClassRule spheres_mixture{{spheres_left}, {}, both_halves, 0.1};
  ClassRule cylinders_right{{metal_cylinders_right}, {}, {}, 0.0};

  spec.classes = {large_cube_large_cylinder(),
                  small_sphere_small_metal_cube(),
                  confounded(cyan_truth, cyan_conf),
                  unconfounded(five_small),
                  unconfounded(spheres_mixture),
                  unconfounded(cylinders_right),
                  large_blue_sphere_small_yellow_sphere()};
  spec.per_class_counts = preset_counts(scale);
  spec.seed = seed;
  return spec;
}

inline DatasetSpec spec_by_name(std::string_view name, Scale scale, std::uint64_t seed) {
  if (name == "ch3") return clevr_hans3_spec(scale, seed);
  if (name == "ch7") return clevr_hans7_spec(scale, seed);
  throw FormatError("unknown dataset spec '" + std::string(name) + "'");
}

/// True when every clause of `inner` also appears in `outer` and `inner` has
/// no relations, so any scene matching `outer` necessarily matches `inner`.
inline bool contains_rule(const ClassRule& outer, const ClassRule& inner) {
  if (!inner.relations.empty() || inner.alt) return false;
  for (const auto& c : inner.clauses) {
    if (std::find(outer.clauses.begin(), outer.clauses.end(), c) == outer.clauses.end()) return false;
  }
  return true;
}

/// Foreign class indices whose split rule a scene of class `cls` satisfies.
/// A foreign rule contained in the matched branch of the scene's own rule is
/// not a violation (CLEVR-Hans7 class 6 inside class rule 5b).
inline std::vector<std::size_t> foreign_matches(std::span<const SceneObject> objects, std::size_t cls,
                                                Split split, const DatasetSpec& spec,
                                                const ClassRule* own_branch = nullptr) {
  const ClassRule& own = spec.classes[cls].rule(split);
  const ClassRule* branch = own_branch;
  if (!branch) {
    auto a = drawn_branch(objects, own);
    branch = (a && a->branch == 1) ? own.alt.get() : &own;
  }
  std::vector<std::size_t> hits;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    if (c == cls) continue;
    const ClassRule& foreign = spec.classes[c].rule(split);
    if (contains_rule(*branch, foreign)) continue;
    if (satisfies_rule(objects, foreign)) hits.push_back(c);
  }
  return hits;
}

namespace detail {

inline SceneObject random_object(const ObjectPattern* p, Rng& rng) {
  std::uniform_int_distribution<int> shape(0, kShapes.size() - 1), size(0, kSizes.size() - 1),
      color(0, kColors.size() - 1), material(0, kMaterials.size() - 1);
  SceneObject o;
  o.shape = static_cast<std::uint8_t>(shape(rng));
  o.size = static_cast<std::uint8_t>(size(rng));
  o.color = static_cast<std::uint8_t>(color(rng));
  o.material = static_cast<std::uint8_t>(material(rng));
  if (p) {
    if (p->shape) o.shape = *p->shape;
    if (p->size) o.size = *p->size;
    if (p->color) o.color = *p->color;
    if (p->material) o.material = *p->material;
  }
  return o;
}

inline bool place(std::vector<SceneObject>& objs, std::span<const Region> regions, double min_sep, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < objs.size(); ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      double x = unit(rng);
      if (regions[i] == Region::kLeftHalf) x *= 0.5;
      if (regions[i] == Region::kRightHalf) x = 0.5 + 0.5 * x;
      std::array<double, 3> pos{x, unit(rng), unit(rng)};
      placed = true;
      for (std::size_t j = 0; j < i; ++j) {
        if (std::hypot(pos[0] - objs[j].pos[0], pos[1] - objs[j].pos[1]) < min_sep) {
          placed = false;
          break;
        }
      }
      if (placed) objs[i].pos = pos;
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace detail

/// Draws one scene of class `cls` for `split`. Object count is uniform in
/// [max(3, objects the rule needs), 10]; rule objects are instantiated from
/// the split's rule, the rest are uniform distractors.
inline SymbolicScene sample_scene(std::size_t cls, Split split, const DatasetSpec& spec, Rng& rng) {
  if (cls >= spec.classes.size()) throw FormatError("class index out of range");
  const ClassRule& rule = spec.classes[cls].rule(split);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int attempt = 0; attempt < spec.retry_budget; ++attempt) {
    const ClassRule* branch = &rule;
    if (rule.alt && unit(rng) < rule.alt_probability) branch = rule.alt.get();

    const int need = branch->required_objects();
    std::uniform_int_distribution<int> count(std::max(kMinObjects, need), kMaxObjects);
    const int n = count(rng);

    std::vector<SceneObject> objs;
    std::vector<Region> regions;
    for (const auto& clause : branch->clauses) {
      for (int i = 0; i < clause.min_count; ++i) {
        objs.push_back(detail::random_object(&clause, rng));
        regions.push_back(clause.region);
      }
    }
    while (static_cast<int>(objs.size()) < n) {
      objs.push_back(detail::random_object(nullptr, rng));
      regions.push_back(Region::kNone);
    }
    if (!detail::place(objs, regions, spec.min_separation, rng)) continue;
    std::shuffle(objs.begin(), objs.end(), rng);

    auto own = satisfies_rule(objs, *branch);
    if (!own) continue;
    // A primary-branch scene that happens to satisfy the alternative would be
    // miscounted as the rarer branch; redraw it.
    if (branch == &rule && rule.alt && satisfies_rule(objs, *rule.alt)) continue;
    if (!foreign_matches(objs, cls, split, spec, branch).empty()) continue;

    SymbolicScene scene;
    scene.objects = std::move(objs);
    scene.class_label = static_cast<int>(cls);
    scene.split = split;
    return scene;
  }
  throw GenerationExhausted("class " + std::to_string(cls) + " split " + std::string(split_name(split)) +
                            " after " + std::to_string(spec.retry_budget) + " attempts");
}

struct Dataset {
  std::string name;
  std::uint64_t spec_hash = 0;
  std::uint64_t seed = 0;
  std::vector<SymbolicScene> scenes;

  std::vector<const SymbolicScene*> split(Split s) const {
    std::vector<const SymbolicScene*> out;
    for (const auto& sc : scenes) {
      if (sc.split == s) out.push_back(&sc);
    }
    return out;
  }

  const SymbolicScene* find(std::string_view id) const {
    for (const auto& sc : scenes) {
      if (sc.id == id) return &sc;
    }
    return nullptr;
  }
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t spec_hash(const DatasetSpec& spec) {
  std::ostringstream os;
  os << spec.name << '|' << spec.seed << '|' << spec.min_separation << '|';
  for (int c : spec.per_class_counts) os << c << ',';
  for (const auto& cls : spec.classes) {
    for (Split s : kSplits) os << describe(cls.rule(s)) << ';';
  }
  return fnv1a(os.str());
}

inline std::string scene_id(const DatasetSpec& spec, Split split, std::size_t cls, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s-%s-c%zu-%05d", spec.name.c_str(), std::string(split_name(split)).c_str(),
                cls, i);
  return buf;
}

/// Deterministic for a fixed spec: each (split, class) shard draws from its
/// own generator seeded from (seed, split, class).
inline Dataset generate_dataset(const DatasetSpec& spec) {
  Dataset ds;
  ds.name = spec.name;
  ds.spec_hash = spec_hash(spec);
  ds.seed = spec.seed;
  for (Split split : kSplits) {
    for (std::size_t cls = 0; cls < spec.classes.size(); ++cls) {
      std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                        static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(cls)};
      Rng rng(seq);
      for (int i = 0; i < spec.count(split); ++i) {
        SymbolicScene sc = sample_scene(cls, split, spec, rng);
        sc.id = scene_id(spec, split, cls, i);
        ds.scenes.push_back(std::move(sc));
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Scene file format

inline ordered_json object_to_json(const SceneObject& o) {
  ordered_json j;
  j["shape"] = kShapes[o.shape];
  j["size"] = kSizes[o.size];
  j["color"] = kColors[o.color];
  j["material"] = kMaterials[o.material];
  j["pos"] = {o.pos[0], o.pos[1], o.pos[2]};
  return j;
}

inline ordered_json scene_to_json(const SymbolicScene& s) {
  ordered_json j;
  j["id"] = s.id;
  j["class"] = s.class_label;
  j["split"] = split_name(s.split);
  j["objects"] = ordered_json::array();
  for (const auto& o : s.objects) j["objects"].push_back(object_to_json(o));
  return j;
}

template <std::size_t N>
std::uint8_t parse_attr(const std::array<std::string_view, N>& names, const nlohmann::json& v,
                        const char* what) {
  auto idx = index_of(names, v.get<std::string>());
  if (!idx) throw FormatError(std::string("unknown ") + what + " '" + v.get<std::string>() + "'");
  return static_cast<std::uint8_t>(*idx);
}

inline SceneObject object_from_json(const nlohmann::json& j) {
  SceneObject o;
  o.shape = parse_attr(kShapes, j.at("shape"), "shape");
  o.size = parse_attr(kSizes, j.at("size"), "size");
  o.color = parse_attr(kColors, j.at("color"), "color");
  o.material = parse_attr(kMaterials, j.at("material"), "material");
  const auto& pos = j.at("pos");
  if (!pos.is_array() || pos.size() != 3) throw FormatError("pos must have three components");
  for (std::size_t a = 0; a < 3; ++a) o.pos[a] = pos[a].get<double>();
  if (!o.valid()) throw FormatError("object position outside [0,1]");
  return o;
}

inline SymbolicScene scene_from_json(const nlohmann::json& j) {
  SymbolicScene s;
  s.id = j.at("id").get<std::string>();
  s.class_label = j.at("class").get<int>();
  s.split = parse_split(j.at("split").get<std::string>());
  for (const auto& o : j.at("objects")) s.objects.push_back(object_from_json(o));
  return s;
}

inline ordered_json meta_to_json(const DatasetSpec& spec, const Dataset& ds) {
  ordered_json j;
  j["format_version"] = kFormatVersion;
  j["spec"] = spec.name;
  j["seed"] = spec.seed;
  j["spec_hash"] = ds.spec_hash;
  j["counts"] = {{"train", spec.count(Split::kTrain)},
                 {"val", spec.count(Split::kVal)},
                 {"test", spec.count(Split::kTest)}};
  j["n_classes"] = spec.classes.size();
  j["rules"] = ordered_json::array();
  for (const auto& cls : spec.classes) {
    ordered_json r;
    r["true"] = describe(cls.true_rule);
    for (Split s : kSplits) r[std::string(split_name(s))] = describe(cls.rule(s));
    j["rules"].push_back(r);
  }
  return j;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes `scenes.jsonl` and `meta.json` into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::string lines;
  for (const auto& s : ds.scenes) {
    lines += scene_to_json(s).dump();
    lines += '\n';
  }
  write_text_atomic(dir / "scenes.jsonl", lines);
  write_text_atomic(dir / "meta.json", meta_to_json(spec, ds).dump() + "\n");
}

struct LoadedDataset {
  Dataset data;
  std::string spec_name;
  int n_classes = 0;
  std::array<int, 3> per_class_counts{};
};

inline LoadedDataset read_dataset(const std::filesystem::path& dir) try {
  LoadedDataset out;
  auto meta = nlohmann::json::parse(read_text(dir / "meta.json"));
  if (meta.at("format_version").get<std::string>() != kFormatVersion) {
    throw FormatError("unsupported dataset format version");
  }
  out.spec_name = meta.at("spec").get<std::string>();
  out.n_classes = meta.at("n_classes").get<int>();
  out.data.name = out.spec_name;
  out.data.seed = meta.at("seed").get<std::uint64_t>();
  out.data.spec_hash = meta.at("spec_hash").get<std::uint64_t>();
  for (Split sp : kSplits) {
    out.per_class_counts[static_cast<std::size_t>(sp)] = meta.at("counts").at(std::string(split_name(sp))).get<int>();
  }
  std::istringstream in(read_text(dir / "scenes.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.data.scenes.push_back(scene_from_json(nlohmann::json::parse(line)));
  }
  return out;
} catch (const nlohmann::json::exception& e) {
  throw FormatError(dir.string() + ": " + e.what());
}

/// The preset spec a stored dataset was generated from, checked against the
/// stored hash.
inline DatasetSpec stored_spec(const LoadedDataset& ld) {
  DatasetSpec spec = spec_by_name(ld.spec_name, Scale::kDesk, ld.data.seed);
  spec.per_class_counts = ld.per_class_counts;
  if (spec_hash(spec) != ld.data.spec_hash) {
    throw FormatError("dataset '" + ld.spec_name + "' does not match any preset spec");
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Verification

struct ConfoundAttribute {
  std::size_t clause = 0;
  AttrGroup group = AttrGroup::kColor;
};

/// Attributes the train rule constrains on top of the true rule.
inline std::vector<ConfoundAttribute> confound_attributes(const ClassSpec& cls) {
  std::vector<ConfoundAttribute> out;
  const ClassRule& conf = cls.rule(Split::kTrain);
  for (std::size_t c = 0; c < std::min(conf.clauses.size(), cls.true_rule.clauses.size()); ++c) {
    const auto& a = conf.clauses[c];
    const auto& t = cls.true_rule.clauses[c];
    if (a.shape && !t.shape) out.push_back({c, AttrGroup::kShape});
    if (a.size && !t.size) out.push_back({c, AttrGroup::kSize});
    if (a.color && !t.color) out.push_back({c, AttrGroup::kColor});
    if (a.material && !t.material) out.push_back({c, AttrGroup::kMaterial});
  }
  return out;
}

inline std::uint8_t attribute_of(const SceneObject& o, AttrGroup g) {
  switch (g) {
    case AttrGroup::kShape: return o.shape;
    case AttrGroup::kSize: return o.size;
    case AttrGroup::kColor: return o.color;
    case AttrGroup::kMaterial: return o.material;
    case AttrGroup::kPosition: break;
  }
  return 0;
}

/// Upper-tail p-value of Pearson's chi-square test against a uniform law.
inline double chi_square_uniform_p(const std::vector<int>& counts) {
  double total = 0;
  for (int c : counts) total += c;
  if (total == 0 || counts.size() < 2) return 1.0;
  const double expected = total / counts.size();
  double stat = 0;
  for (int c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

struct ConfoundHistogram {
  std::size_t cls = 0;
  ConfoundAttribute attribute;
  std::vector<int> counts;
  double chi_square_p = 1.0;
};

struct VerificationReport {
  int exclusivity_violations = 0;
  int own_rule_violations = 0;
  // adherence[cls][split]: fraction of scenes satisfying the train-split rule.
  std::vector<std::array<double, 3>> confound_adherence;
  std::vector<bool> confounded;
  std::vector<ConfoundHistogram> test_histograms;
  // alt_branch_fraction[cls]: over all splits, scenes satisfying the
  // alternative branch; -1 for classes without one.
  std::vector<double> alt_branch_fraction;
  bool balanced = true;
  std::vector<std::array<int, 3>> counts;
};

inline VerificationReport verify_dataset(const Dataset& ds, const DatasetSpec& spec) {
  const std::size_t nc = spec.classes.size();
  VerificationReport rep;
  rep.confound_adherence.assign(nc, {0.0, 0.0, 0.0});
  rep.counts.assign(nc, {0, 0, 0});
  rep.alt_branch_fraction.assign(nc, -1.0);
  for (const auto& c : spec.classes) rep.confounded.push_back(c.confounded());

  std::vector<int> alt_hits(nc, 0), totals(nc, 0);
  std::vector<std::array<int, 3>> adherent(nc, {0, 0, 0});
  for (const auto& sc : ds.scenes) {
    const auto cls = static_cast<std::size_t>(sc.class_label);
    const auto si = static_cast<std::size_t>(sc.split);
    ++rep.counts[cls][si];
    ++totals[cls];
    const ClassSpec& cspec = spec.classes[cls];
    auto own = drawn_branch(sc.objects, cspec.rule(sc.split));
    if (!own) ++rep.own_rule_violations;
    if (!foreign_matches(sc.objects, cls, sc.split, spec).empty()) ++rep.exclusivity_violations;
    if (satisfies_rule(sc, cspec.rule(Split::kTrain))) ++adherent[cls][si];
    if (own && own->branch == 1) ++alt_hits[cls];
  }
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t s = 0; s < 3; ++s) {
      rep.confound_adherence[c][s] = rep.counts[c][s] ? double(adherent[c][s]) / rep.counts[c][s] : 0.0;
      if (rep.counts[c][s] != rep.counts[0][s]) rep.balanced = false;
    }
    if (spec.classes[c].true_rule.alt && totals[c]) rep.alt_branch_fraction[c] = double(alt_hits[c]) / totals[c];
  }

  for (std::size_t c = 0; c < nc; ++c) {
    for (const auto& attr : confound_attributes(spec.classes[c])) {
      ConfoundHistogram h;
      h.cls = c;
      h.attribute = attr;
      const std::size_t width = kGroups[static_cast<std::size_t>(attr.group)].width;
      h.counts.assign(width, 0);
      for (const auto& sc : ds.scenes) {
        if (sc.split != Split::kTest || static_cast<std::size_t>(sc.class_label) != c) continue;
        auto a = satisfies_rule(sc, spec.classes[c].true_rule);
        if (!a || a->objects[attr.clause].empty()) continue;
        ++h.counts[attribute_of(sc.objects[a->objects[attr.clause].front()], attr.group)];
      }
      h.chi_square_p = chi_square_uniform_p(h.counts);
      rep.test_histograms.push_back(std::move(h));
    }
  }
  return rep;
}

}  // namespace nesyxil
