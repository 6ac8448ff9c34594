#pragma once

// Integrated-Gradients symbolic explanations over slot matrices, ground-truth
// explanations derived from class rules, and the L1 explanation error.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "nesyxil/autodiff.hpp"
#include "nesyxil/dataset.hpp"
#include "nesyxil/rules.hpp"
#include "nesyxil/scene.hpp"
#include "nesyxil/set_transformer.hpp"

namespace nesyxil {

inline constexpr std::size_t kTrainIgSteps = 50;
inline constexpr std::size_t kMetricIgSteps = 300;

/// Slot encoding of a scene that depends only on (seed, scene id), so every
/// component sees the same slot order for a scene.
inline SlotMatrix encode_for_model(const SymbolicScene& scene, std::uint64_t seed, std::size_t slots = kDefaultSlots) {
  const std::uint64_t h = fnv1a(scene.id);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  Rng rng(seq);
  return encode_scene(scene, slots, rng);
}

/// Stacks K x D matrices into a [B, K, D] tensor.
inline Tensor stack_slots(std::span<const SlotMatrix> zs) {
  if (zs.empty()) throw ShapeMismatch("cannot stack an empty batch");
  const std::size_t k = zs[0].slots(), d = zs[0].width();
  Tensor out(Shape{zs.size(), k, d});
  for (std::size_t b = 0; b < zs.size(); ++b) {
    if (zs[b].slots() != k || zs[b].width() != d) throw ShapeMismatch("ragged slot matrices");
    std::copy(zs[b].values().begin(), zs[b].values().end(), out.data() + b * k * d);
  }
  return out;
}

inline SlotMatrix unstack_slot(const Tensor& t, std::size_t b) {
  const std::size_t k = t.dim(1), d = t.dim(2);
  SlotMatrix z(k, d);
  std::copy(t.data() + b * k * d, t.data() + (b + 1) * k * d, z.values().begin());
  return z;
}

/// Objects decoded from the nonzero rows of a binarized matrix, with the slot
/// each came from.
struct SlotObjects {
  std::vector<SceneObject> objects;
  std::vector<std::size_t> slot;
};

inline SlotObjects slot_objects(const SlotMatrix& zb) {
  SlotObjects out;
  for (std::size_t k = 0; k < zb.slots(); ++k) {
    if (zb.row_is_zero(k)) continue;
    out.objects.push_back(decode_row(zb.row(k)));
    out.slot.push_back(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Integrated gradients

namespace detail {

inline double ig_alpha(std::size_t s, std::size_t steps) {
  return (static_cast<double>(s) + 0.5) / static_cast<double>(steps);
}

// Scaled inputs alpha_s * z for a list of (sample, step) pairs.
inline Tensor scaled_inputs(const Tensor& z, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                            std::size_t steps) {
  const std::size_t row = z.dim(1) * z.dim(2);
  Tensor out(Shape{pairs.size(), z.dim(1), z.dim(2)});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double a = ig_alpha(pairs[i].second, steps);
    const double* src = z.data() + pairs[i].first * row;
    double* dst = out.data() + i * row;
    for (std::size_t j = 0; j < row; ++j) dst[j] = a * src[j];
  }
  return out;
}

inline Tensor target_mask(std::span<const std::size_t> targets, std::size_t n_classes) {
  Tensor m(Shape{targets.size(), n_classes});
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= n_classes) throw ShapeMismatch("target class out of range");
    m[i * n_classes + targets[i]] = 1.0;
  }
  return m;
}

}  // namespace detail

/// Sum over rows of a per-row score; rows are independent inputs, so its
/// gradient holds each row's own input gradient.
using ScoreFn = std::function<ad::Var(const ad::Var& x, std::span<const std::size_t> row_targets)>;

/// Integrated gradients of `score` with respect to z ([B, ...]) against the
/// all-zero baseline, using `steps` Riemann midpoints. At most `max_rows`
/// scaled inputs share a graph.
inline Tensor integrated_gradients(const ScoreFn& score, const Tensor& z, std::span<const std::size_t> targets,
                                   std::size_t steps, std::size_t max_rows = 2048) {
  if (steps == 0) throw ShapeMismatch("integrated gradients need at least one step");
  if (z.rank() < 2 || targets.size() != z.dim(0)) throw ShapeMismatch("targets must match the batch");
  const std::size_t row = z.numel() / z.dim(0);
  Shape row_shape(z.shape().begin() + 1, z.shape().end());

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    for (std::size_t s = 0; s < steps; ++s) pairs.emplace_back(b, s);
  }
  Tensor out(z.shape());
  for (std::size_t begin = 0; begin < pairs.size(); begin += max_rows) {
    const std::size_t n = std::min(max_rows, pairs.size() - begin);
    Shape xs{n};
    xs.insert(xs.end(), row_shape.begin(), row_shape.end());
    Tensor scaled(xs);
    std::vector<std::size_t> chunk_targets;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [b, s] = pairs[begin + i];
      const double a = detail::ig_alpha(s, steps);
      for (std::size_t j = 0; j < row; ++j) scaled[i * row + j] = a * z[b * row + j];
      chunk_targets.push_back(targets[b]);
    }
    ad::Var x = ad::Var::leaf(std::move(scaled));
    Tensor g = ad::grad(score(x, chunk_targets), {x})[0].value();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = pairs[begin + i].first;
      for (std::size_t j = 0; j < row; ++j) out[b * row + j] += g[i * row + j];
    }
  }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= z[i] / static_cast<double>(steps);
  return out;
}

/// Summed target-class probabilities of the model in eval mode.
inline ScoreFn probability_score(const SetTransformer& model, const ParamVars& p) {
  return [&model, &p](const ad::Var& x, std::span<const std::size_t> targets) {
    ForwardResult f = model.forward(p, x);
    return ad::sum_all(ad::mul(f.probs, ad::Var::constant(detail::target_mask(targets, model.config().n_classes))));
  };
}

/// Integrated gradients of the target-class probability for a [B, K, D]
/// batch of slot matrices.
inline Tensor integrated_gradients(const SetTransformer& model, const ModelParams& params, const Tensor& z,
                                   std::span<const std::size_t> targets, std::size_t steps,
                                   std::size_t max_rows = 2048) {
  ParamVars p = bind(params, false);
  return integrated_gradients(probability_score(model, p), z, targets, steps, max_rows);
}

/// Integrated gradients kept on the graph: the result can be differentiated
/// with respect to the parameters in `p`.
inline ad::Var integrated_gradients_graph(const SetTransformer& model, const ParamVars& p, const Tensor& z,
                                          std::span<const std::size_t> targets, std::size_t steps) {
  if (steps == 0) throw ShapeMismatch("integrated gradients need at least one step");
  if (z.rank() != 3 || targets.size() != z.dim(0)) throw ShapeMismatch("targets must match the batch");
  const std::size_t batch = z.dim(0), k = z.dim(1), d = z.dim(2);
  // Rows are sample-major with steps innermost, so the step mean is a reshape
  // followed by a mean over axis 1.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> row_targets;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < steps; ++s) {
      pairs.emplace_back(b, s);
      row_targets.push_back(targets[b]);
    }
  }
  ad::Var x = ad::Var::leaf(detail::scaled_inputs(z, pairs, steps));
  ForwardResult f = model.forward(p, x);
  ad::Var picked = ad::sum_all(
      ad::mul(f.probs, ad::Var::constant(detail::target_mask(row_targets, model.config().n_classes))));
  ad::Var g = ad::grad(picked, {x}, {.create_graph = true})[0];
  ad::Var avg = ad::mean(ad::reshape(g, {batch, steps, k, d}), 1, false);
  return ad::mul(avg, ad::Var::constant(z));
}

// ---------------------------------------------------------------------------
// Explanations

struct Explanation {
  SlotMatrix values;  // positive part of raw_ig, max-normalized to [0,1]
  SlotMatrix raw_ig;
  std::size_t target_class = 0;
};

inline SlotMatrix normalize_positive(const SlotMatrix& raw) {
  SlotMatrix v = raw;
  double mx = 0.0;
  for (double& x : v.values()) {
    x = x > 0.0 ? x : 0.0;
    mx = std::max(mx, x);
  }
  if (mx > 0.0) {
    for (double& x : v.values()) x /= mx;
  }
  return v;
}

inline Explanation make_explanation(SlotMatrix raw, std::size_t target) {
  Explanation e;
  e.values = normalize_positive(raw);
  e.raw_ig = std::move(raw);
  e.target_class = target;
  return e;
}

/// Explanations for a batch of slot matrices.
inline std::vector<Explanation> symbolic_explanations(const SetTransformer& model, const ModelParams& params,
                                                      std::span<const SlotMatrix> zs,
                                                      std::span<const std::size_t> targets,
                                                      std::size_t steps = kMetricIgSteps) {
  std::vector<Explanation> out;
  if (zs.empty()) return out;
  Tensor ig = integrated_gradients(model, params, stack_slots(zs), targets, steps);
  for (std::size_t b = 0; b < zs.size(); ++b) out.push_back(make_explanation(unstack_slot(ig, b), targets[b]));
  return out;
}

inline Explanation symbolic_explanation(const SetTransformer& model, const ModelParams& params, const SlotMatrix& z,
                                        std::size_t target, std::size_t steps = kMetricIgSteps) {
  return symbolic_explanations(model, params, std::span<const SlotMatrix>(&z, 1),
                               std::span<const std::size_t>(&target, 1), steps)[0];
}

/// Differentiable counterpart of the normalization: ig [B, K, D] ->
/// relu(ig) / max per sample, zero where a sample has no positive entry.
inline ad::Var normalize_positive_graph(const ad::Var& ig) {
  const Shape& s = ig.shape();
  const std::size_t batch = s[0];
  ad::Var pos = ad::relu(ig);
  ad::Var mx = ad::max(ad::reshape(pos, {batch, s[1] * s[2]}), -1, true);  // [B, 1]
  Tensor guard(Shape{batch, 1});
  for (std::size_t b = 0; b < batch; ++b) guard[b] = mx.value()[b] > 0.0 ? 0.0 : 1.0;
  ad::Var denom = ad::reshape(ad::add(mx, ad::Var::constant(std::move(guard))), {batch, 1, 1});
  return ad::div(pos, denom);
}

/// Slots whose largest explanation value reaches `t` (and is positive).
inline std::vector<std::size_t> relevant_slots(const Explanation& e, double t) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < e.values.slots(); ++k) {
    auto r = e.values.row(k);
    const double mx = *std::max_element(r.begin(), r.end());
    if (mx > 0.0 && mx >= t) out.push_back(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth and L1 error

/// Binary mask over the dims a rule names, on the slots its assignment uses.
/// Regions mark pos:x; relations mark pos:z on both related groups.
inline SlotMatrix ground_truth_explanation(const SlotMatrix& z, const ClassRule& rule) {
  SlotMatrix zb = binarize(z);
  SlotMatrix gt(z.slots(), z.width());
  SlotObjects so = slot_objects(zb);
  auto a = drawn_branch(so.objects, rule);
  if (!a) return gt;
  const ClassRule& branch = a->branch == 1 ? *rule.alt : rule;
  for (std::size_t c = 0; c < branch.clauses.size(); ++c) {
    std::vector<std::size_t> dims = branch.clauses[c].constrained_dims();
    for (const auto& r : branch.relations) {
      if (r.a == c || r.b == c) dims.push_back(kPositionOffset + 2);
    }
    for (std::size_t obj : a->objects[c]) {
      for (std::size_t d : dims) gt(so.slot[obj], d) = 1.0;
    }
  }
  return gt;
}

enum class L1Mode { kAll, kTruePositive };

inline double explanation_l1(const SlotMatrix& gt, const SlotMatrix& e, L1Mode mode) {
  if (gt.slots() != e.slots() || gt.width() != e.width()) throw ShapeMismatch("explanation shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < gt.values().size(); ++i) {
    if (mode == L1Mode::kTruePositive && gt.values()[i] != 1.0) continue;
    s += std::abs(gt.values()[i] - e.values()[i]);
  }
  return s;
}

struct L1Aggregate {
  double global = 0.0;
  std::vector<double> per_class;
  std::vector<std::size_t> counts;
};

/// Means of per-sample errors, globally and per class.
inline L1Aggregate aggregate_l1(std::span<const double> errors, std::span<const std::size_t> labels,
                                std::size_t n_classes) {
  L1Aggregate out;
  out.per_class.assign(n_classes, 0.0);
  out.counts.assign(n_classes, 0);
  for (std::size_t i = 0; i < errors.size(); ++i) {
    out.global += errors[i];
    out.per_class.at(labels[i]) += errors[i];
    ++out.counts[labels[i]];
  }
  if (!errors.empty()) out.global /= static_cast<double>(errors.size());
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (out.counts[c]) out.per_class[c] /= static_cast<double>(out.counts[c]);
  }
  return out;
}

struct L1Report {
  L1Aggregate all;
  L1Aggregate true_positive;
};

/// L1 explanation error of a model over one split, explaining each scene's
/// true class against its class's true rule.
inline L1Report aggregate_l1(const Dataset& ds, const DatasetSpec& spec, const SetTransformer& model,
                             const ModelParams& params, Split split, std::uint64_t encode_seed,
                             std::size_t steps = kMetricIgSteps, std::size_t chunk = 16) {
  std::vector<const SymbolicScene*> scenes = ds.split(split);
  std::vector<double> all, tp;
  std::vector<std::size_t> labels;
  for (std::size_t begin = 0; begin < scenes.size(); begin += chunk) {
    std::vector<SlotMatrix> zs;
    std::vector<std::size_t> targets;
    for (std::size_t i = begin; i < std::min(scenes.size(), begin + chunk); ++i) {
      zs.push_back(encode_for_model(*scenes[i], encode_seed));
      targets.push_back(static_cast<std::size_t>(scenes[i]->class_label));
    }
    auto ex = symbolic_explanations(model, params, zs, targets, steps);
    for (std::size_t j = 0; j < zs.size(); ++j) {
      SlotMatrix gt = ground_truth_explanation(zs[j], spec.classes.at(targets[j]).true_rule);
      all.push_back(explanation_l1(gt, ex[j].values, L1Mode::kAll));
      tp.push_back(explanation_l1(gt, ex[j].values, L1Mode::kTruePositive));
      labels.push_back(targets[j]);
    }
  }
  return {aggregate_l1(all, labels, spec.classes.size()), aggregate_l1(tp, labels, spec.classes.size())};
}

}  // namespace nesyxil
