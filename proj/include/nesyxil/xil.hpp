#pragma once

// Scoped semantic feedback, its compilation to slot-level masks, and the
// explanation penalties (HINT-style MSE and right-for-the-right-reasons).

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nesyxil/autodiff.hpp"
#include "nesyxil/dataset.hpp"
#include "nesyxil/explainer.hpp"
#include "nesyxil/rules.hpp"
#include "nesyxil/set_transformer.hpp"

namespace nesyxil {

enum class Scope { kGlobal, kClass, kSample };
enum class Polarity { kRelevant, kIrrelevant };

struct FeedbackRule {
  Scope scope = Scope::kGlobal;
  int cls = -1;           // class scope only
  std::string sample_id;  // sample scope only
  Polarity polarity = Polarity::kRelevant;
  std::optional<ObjectPattern> pattern;  // absent: every nonzero slot
  std::vector<std::size_t> dims;

  bool applies_to(const std::string& id, int label) const {
    switch (scope) {
      case Scope::kGlobal: return true;
      case Scope::kClass: return label == cls;
      case Scope::kSample: return id == sample_id;
    }
    return false;
  }

  friend bool operator==(const FeedbackRule&, const FeedbackRule&) = default;
};

// ---------------------------------------------------------------------------
// JSON

inline std::string_view scope_name(Scope s) {
  switch (s) {
    case Scope::kGlobal: return "global";
    case Scope::kClass: return "class";
    case Scope::kSample: return "sample";
  }
  return "";
}

inline ordered_json pattern_to_json(const ObjectPattern& p) {
  ordered_json j = ordered_json::object();
  if (p.shape) j["shape"] = kShapes[*p.shape];
  if (p.size) j["size"] = kSizes[*p.size];
  if (p.color) j["color"] = kColors[*p.color];
  if (p.material) j["material"] = kMaterials[*p.material];
  if (p.region == Region::kLeftHalf) j["region"] = "left_half";
  if (p.region == Region::kRightHalf) j["region"] = "right_half";
  if (p.min_count != 1) j["min_count"] = p.min_count;
  return j;
}

inline ObjectPattern pattern_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidFeedback("pattern must be an object");
  ObjectPattern p;
  auto attr = [&](const char* key, auto& names, std::optional<std::uint8_t>& slot) {
    if (!j.contains(key)) return;
    if (!j[key].is_string()) throw InvalidFeedback(std::string("pattern ") + key + " must be a string");
    auto idx = index_of(names, j[key].template get<std::string>());
    if (!idx) throw InvalidFeedback(std::string("unknown ") + key + " '" + j[key].template get<std::string>() + "'");
    slot = static_cast<std::uint8_t>(*idx);
  };
  for (const auto& [key, _] : j.items()) {
    if (key != "shape" && key != "size" && key != "color" && key != "material" && key != "region" &&
        key != "min_count") {
      throw InvalidFeedback("unknown pattern key '" + key + "'");
    }
  }
  attr("shape", kShapes, p.shape);
  attr("size", kSizes, p.size);
  attr("color", kColors, p.color);
  attr("material", kMaterials, p.material);
  if (j.contains("region")) {
    const auto r = j["region"].is_string() ? j["region"].get<std::string>() : std::string();
    if (r == "left_half") p.region = Region::kLeftHalf;
    else if (r == "right_half") p.region = Region::kRightHalf;
    else if (r != "none") throw InvalidFeedback("unknown region '" + r + "'");
  }
  if (j.contains("min_count")) {
    if (!j["min_count"].is_number_integer() || j["min_count"].get<int>() < 1) {
      throw InvalidFeedback("min_count must be a positive integer");
    }
    p.min_count = j["min_count"].get<int>();
  }
  if (!p.has_constraint()) throw InvalidFeedback("pattern sets no constraint");
  return p;
}

inline ordered_json rule_to_json(const FeedbackRule& r) {
  ordered_json j;
  j["scope"] = scope_name(r.scope);
  if (r.scope == Scope::kClass) j["class"] = r.cls;
  if (r.scope == Scope::kSample) j["sample_id"] = r.sample_id;
  j["polarity"] = r.polarity == Polarity::kRelevant ? "relevant" : "irrelevant";
  ordered_json target;
  if (r.pattern) target["pattern"] = pattern_to_json(*r.pattern);
  ordered_json attrs = ordered_json::array();
  for (std::size_t d : r.dims) attrs.push_back(dim_name(d));
  target["attributes"] = attrs;
  j["target"] = target;
  return j;
}

inline FeedbackRule rule_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidFeedback("feedback record must be an object");
  FeedbackRule r;
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw InvalidFeedback(std::string("missing string field '") + key + "'");
    return j[key].get<std::string>();
  };
  const std::string scope = str("scope");
  if (scope == "global") {
    r.scope = Scope::kGlobal;
  } else if (scope == "class") {
    r.scope = Scope::kClass;
    if (!j.contains("class") || !j["class"].is_number_integer()) throw InvalidFeedback("class scope needs an integer 'class'");
    r.cls = j["class"].get<int>();
    if (r.cls < 0) throw InvalidFeedback("class must be nonnegative");
  } else if (scope == "sample") {
    r.scope = Scope::kSample;
    r.sample_id = str("sample_id");
    if (r.sample_id.empty()) throw InvalidFeedback("empty sample_id");
  } else {
    throw InvalidFeedback("unknown scope '" + scope + "'");
  }
  const std::string pol = str("polarity");
  if (pol == "relevant") r.polarity = Polarity::kRelevant;
  else if (pol == "irrelevant") r.polarity = Polarity::kIrrelevant;
  else throw InvalidFeedback("unknown polarity '" + pol + "'");

  if (!j.contains("target") || !j["target"].is_object()) throw InvalidFeedback("missing 'target'");
  const auto& t = j["target"];
  if (t.contains("pattern") && !t["pattern"].is_null()) r.pattern = pattern_from_json(t["pattern"]);
  if (!t.contains("attributes") || !t["attributes"].is_array() || t["attributes"].empty()) {
    throw InvalidFeedback("target.attributes must be a nonempty array");
  }
  for (const auto& a : t["attributes"]) {
    if (!a.is_string()) throw InvalidFeedback("attribute names must be strings");
    auto d = parse_dim(a.get<std::string>());
    if (!d) throw InvalidFeedback("unknown attribute '" + a.get<std::string>() + "'");
    if (std::find(r.dims.begin(), r.dims.end(), *d) != r.dims.end()) {
      throw InvalidFeedback("attribute '" + a.get<std::string>() + "' listed twice");
    }
    r.dims.push_back(*d);
  }
  return r;
}

class FeedbackSet {
 public:
  FeedbackSet() = default;
  explicit FeedbackSet(std::vector<FeedbackRule> rules) {
    for (auto& r : rules) add(std::move(r));
  }

  const std::vector<FeedbackRule>& rules() const { return rules_; }
  bool empty() const { return rules_.empty(); }
  // Bumped by every append.
  std::size_t version() const { return rules_.size(); }

  /// Appends a rule, rejecting it if an existing rule with the same scope
  /// instance and pattern gives any of its dims the opposite polarity.
  void add(FeedbackRule r) {
    if (r.dims.empty()) throw InvalidFeedback("rule names no attributes");
    for (const auto& o : rules_) {
      if (o.scope != r.scope || o.cls != r.cls || o.sample_id != r.sample_id || o.pattern != r.pattern ||
          o.polarity == r.polarity) {
        continue;
      }
      for (std::size_t d : r.dims) {
        if (std::find(o.dims.begin(), o.dims.end(), d) != o.dims.end()) {
          throw InvalidFeedback("conflicting polarity for '" + dim_name(d) + "' in the same scope and pattern");
        }
      }
    }
    rules_.push_back(std::move(r));
  }

  /// Checks class and sample references against a dataset.
  void validate_references(const Dataset& ds, std::size_t n_classes) const {
    for (const auto& r : rules_) check_reference(r, ds, n_classes);
  }

  static void check_reference(const FeedbackRule& r, const Dataset& ds, std::size_t n_classes) {
    if (r.scope == Scope::kClass && static_cast<std::size_t>(r.cls) >= n_classes) {
      throw InvalidFeedback("class " + std::to_string(r.cls) + " out of range");
    }
    if (r.scope == Scope::kSample && !ds.find(r.sample_id)) {
      throw InvalidFeedback("unknown sample '" + r.sample_id + "'");
    }
  }

  ordered_json to_json() const {
    ordered_json j = ordered_json::array();
    for (const auto& r : rules_) j.push_back(rule_to_json(r));
    return j;
  }

  /// Canonical file text: one rule per line inside a JSON array.
  std::string serialize() const {
    std::string out = "[";
    for (std::size_t i = 0; i < rules_.size(); ++i) {
      out += i ? ",\n " : "\n ";
      out += rule_to_json(rules_[i]).dump();
    }
    out += rules_.empty() ? "]\n" : "\n]\n";
    return out;
  }

  static FeedbackSet parse(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidFeedback(std::string("not valid JSON: ") + e.what());
    }
    if (!j.is_array()) throw InvalidFeedback("feedback file must hold an array of rules");
    FeedbackSet fs;
    for (const auto& r : j) fs.add(rule_from_json(r));
    return fs;
  }

 private:
  std::vector<FeedbackRule> rules_;
};

// ---------------------------------------------------------------------------
// Compilation

struct CompiledMasks {
  SlotMatrix pos;
  SlotMatrix neg;
  // Rules that applied to the sample but whose pattern matched nothing.
  std::vector<std::size_t> unmatched;
};

/// A^s for one sample. Pattern rules mark every slot matching the pattern when
/// at least min_count slots do; pattern-free rules mark every nonzero slot.
inline CompiledMasks compile_feedback(const FeedbackSet& fs, const std::string& sample_id, int label,
                                      const SlotMatrix& zb) {
  CompiledMasks m{SlotMatrix(zb.slots(), zb.width()), SlotMatrix(zb.slots(), zb.width()), {}};
  SlotObjects so = slot_objects(zb);
  for (std::size_t i = 0; i < fs.rules().size(); ++i) {
    const FeedbackRule& r = fs.rules()[i];
    if (!r.applies_to(sample_id, label)) continue;
    SlotMatrix& mask = r.polarity == Polarity::kRelevant ? m.pos : m.neg;
    std::vector<std::size_t> slots;
    if (r.pattern) {
      for (std::size_t o = 0; o < so.objects.size(); ++o) {
        if (matches_pattern(so.objects[o], *r.pattern)) slots.push_back(so.slot[o]);
      }
      if (slots.size() < static_cast<std::size_t>(r.pattern->min_count)) {
        m.unmatched.push_back(i);
        continue;
      }
    } else {
      slots = so.slot;
    }
    for (std::size_t k : slots) {
      for (std::size_t d : r.dims) mask(k, d) = 1.0;
    }
  }
  return m;
}

/// Class-scoped relevant rules naming each clause of every class's true rule
/// (both branches of a mixture). Region clauses name pos:x, clauses in a
/// relation name pos:z.
inline FeedbackSet class_rule_feedback(const DatasetSpec& spec) {
  FeedbackSet fs;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    std::vector<const ClassRule*> branches{&spec.classes[c].true_rule};
    if (spec.classes[c].true_rule.alt) branches.push_back(spec.classes[c].true_rule.alt.get());
    std::vector<ObjectPattern> seen;
    for (const ClassRule* rule : branches) {
      for (std::size_t i = 0; i < rule->clauses.size(); ++i) {
        const ObjectPattern& p = rule->clauses[i];
        if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
        seen.push_back(p);
        FeedbackRule r;
        r.scope = Scope::kClass;
        r.cls = static_cast<int>(c);
        r.polarity = Polarity::kRelevant;
        r.pattern = p;
        r.dims = p.constrained_dims();
        for (const auto& rel : rule->relations) {
          if ((rel.a == i || rel.b == i) &&
              std::find(r.dims.begin(), r.dims.end(), kPositionOffset + 2) == r.dims.end()) {
            r.dims.push_back(kPositionOffset + 2);
          }
        }
        fs.add(std::move(r));
      }
    }
  }
  return fs;
}

/// "Never use the color gray": irrelevant on color:gray of every object.
inline FeedbackSet not_gray_feedback() {
  FeedbackRule r;
  r.scope = Scope::kGlobal;
  r.polarity = Polarity::kIrrelevant;
  r.dims = {*parse_dim("color:gray")};
  return FeedbackSet({r});
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of the per-sample squared error summed over K x D.
/// a_pos: [B, K, D]; explanation: [B, K, D] normalized explanations.
inline ad::Var hint_mse_loss(const Tensor& a_pos, const ad::Var& explanation) {
  if (a_pos.shape() != explanation.shape()) {
    throw ShapeMismatch("mask " + shape_str(a_pos.shape()) + " vs explanation " + shape_str(explanation.shape()));
  }
  ad::Var diff = ad::sub(ad::Var::constant(a_pos), explanation);
  return ad::scale(ad::sum_all(ad::square(diff)), 1.0 / static_cast<double>(a_pos.dim(0)));
}

/// Squared input gradient of sum_k log y_k under the mask, summed over the
/// batch. `x` must be the leaf the log-probabilities were computed from.
inline ad::Var rrr_penalty(const ad::Var& x, const ad::Var& log_probs, const Tensor& a_neg) {
  if (a_neg.shape() != x.shape()) {
    throw ShapeMismatch("mask " + shape_str(a_neg.shape()) + " vs input " + shape_str(x.shape()));
  }
  ad::Var g = ad::grad(ad::sum_all(log_probs), {x}, {.create_graph = true})[0];
  return ad::sum_all(ad::square(ad::mul(ad::Var::constant(a_neg), g)));
}

inline ad::Var rrr_loss(const SetTransformer& model, const ParamVars& p, const Tensor& z, const Tensor& a_neg,
                        const ForwardOptions& opts = {}) {
  ad::Var x = ad::Var::leaf(z);
  ForwardResult f = model.forward(p, x, opts);
  return rrr_penalty(x, ad::log_softmax(f.logits, -1), a_neg);
}

inline ad::Var total_loss(const ad::Var& ce, const ad::Var& expl, double lambda) {
  if (lambda < 0.0) throw ShapeMismatch("lambda must be nonnegative");
  if (lambda == 0.0) return ce;
  return ad::add(ce, ad::scale(expl, lambda));
}

inline double total_loss(double ce, double expl, double lambda) { return ce + lambda * expl; }

}  // namespace nesyxil
