#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nesyxil/explainer.hpp"
#include "support.hpp"

using namespace nesyxil;
using ad::Var;
using testing_support::random_tensor;

namespace {

ModelConfig tiny(std::size_t nc = 3) {
  ModelConfig c;
  c.d_hidden = 8;
  c.n_heads = 2;
  c.n_classes = nc;
  return c;
}

SceneObject obj(std::string_view shape, std::string_view size, std::string_view color, std::string_view material,
                std::array<double, 3> pos = {0.5, 0.5, 0.5}) {
  SceneObject o;
  o.shape = static_cast<std::uint8_t>(*index_of(kShapes, shape));
  o.size = static_cast<std::uint8_t>(*index_of(kSizes, size));
  o.color = static_cast<std::uint8_t>(*index_of(kColors, color));
  o.material = static_cast<std::uint8_t>(*index_of(kMaterials, material));
  o.pos = pos;
  return o;
}

// Objects placed in slots 0..n-1 in order.
SlotMatrix slots_of(const std::vector<SceneObject>& objs, std::size_t k = 10) {
  SlotMatrix z(k);
  for (std::size_t i = 0; i < objs.size(); ++i) {
    auto e = encode_object(objs[i]);
    std::copy(e.begin(), e.end(), z.row(i).begin());
  }
  return z;
}

SlotMatrix random_scene_matrix(Rng& rng, std::size_t n_objects) {
  std::vector<SceneObject> objs;
  for (std::size_t i = 0; i < n_objects; ++i) objs.push_back(testing_support::random_object(rng));
  return slots_of(objs);
}

std::size_t dim(std::string_view name) { return *parse_dim(name); }

// Freshly initialized biases are zero, which makes the network nearly scale
// invariant along the IG path; trained networks are not.
ModelParams with_random_biases(ModelParams p, Rng& rng) {
  std::normal_distribution<double> n(0.0, 0.5);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& name = p.names()[i];
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      for (std::size_t j = 0; j < p.tensors()[i].numel(); ++j) p.tensors()[i][j] = n(rng);
    }
  }
  return p;
}

double prob_of(const SetTransformer& m, const ModelParams& p, const SlotMatrix& z, std::size_t cls) {
  ad::NoGrad ng;
  Tensor t = stack_slots(std::span<const SlotMatrix>(&z, 1));
  return m.forward(bind(p, false), Var::constant(t)).probs.value()[cls];
}

}  // namespace

TEST(IntegratedGradients, LinearScorerIsExact) {
  Rng rng(1);
  Tensor w = random_tensor({5}, rng);
  Tensor z = random_tensor({2, 5}, rng);
  ScoreFn linear = [&](const Var& x, std::span<const std::size_t>) {
    return ad::sum_all(ad::mul(x, Var::constant(w)));
  };
  std::vector<std::size_t> t{0, 0};
  for (std::size_t steps : {1u, 7u, 300u}) {
    Tensor ig = integrated_gradients(linear, z, t, steps);
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(ig[j], w[j % 5] * z[j], 1e-12);
  }
}

TEST(IntegratedGradients, ReluStep) {
  ScoreFn f = [](const Var& x, std::span<const std::size_t>) {
    return ad::sum_all(ad::relu(ad::add_scalar(x, -0.5)));
  };
  Tensor z({1, 1}, std::vector<double>{1.0});
  std::vector<std::size_t> t{0};
  for (std::size_t steps : {100u, 300u, 301u}) {
    EXPECT_NEAR(integrated_gradients(f, z, t, steps)[0], 0.5, 1e-2);
  }
  EXPECT_THROW(integrated_gradients(f, z, t, 0), ShapeMismatch);
}

TEST(IntegratedGradients, ChunkingDoesNotChangeResult) {
  Rng rng(2);
  SetTransformer m(tiny());
  auto p = init_params(m.config(), 1);
  std::vector<SlotMatrix> zs{random_scene_matrix(rng, 4), random_scene_matrix(rng, 6)};
  Tensor z = stack_slots(zs);
  std::vector<std::size_t> t{0, 2};
  Tensor a = integrated_gradients(m, p, z, t, 20);
  Tensor b = integrated_gradients(m, p, z, t, 20, 7);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(IntegratedGradients, CompletenessOnRandomModels) {
  Rng rng(3);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SetTransformer m(ModelConfig{});
    auto p = with_random_biases(init_params(m.config(), seed), rng);
    SlotMatrix z = random_scene_matrix(rng, 3 + seed);
    const std::size_t cls = seed % 3;
    Explanation e = symbolic_explanation(m, p, z, cls, 300);
    const double total = std::accumulate(e.raw_ig.values().begin(), e.raw_ig.values().end(), 0.0);
    EXPECT_NEAR(total, prob_of(m, p, z, cls) - prob_of(m, p, SlotMatrix(10), cls), 1e-3);
  }
}

TEST(IntegratedGradients, ZeroInputAndPaddingRows) {
  Rng rng(4);
  SetTransformer m(tiny());
  auto p = init_params(m.config(), 2);
  Explanation zero = symbolic_explanation(m, p, SlotMatrix(10), 1, 30);
  for (double v : zero.raw_ig.values()) EXPECT_EQ(v, 0.0);
  SlotMatrix z = random_scene_matrix(rng, 4);
  Explanation e = symbolic_explanation(m, p, z, 1, 30);
  for (std::size_t k = 4; k < 10; ++k) {
    for (double v : e.raw_ig.row(k)) EXPECT_EQ(v, 0.0);
    for (double v : e.values.row(k)) EXPECT_EQ(v, 0.0);
  }
}

TEST(IntegratedGradients, SlotPermutationEquivariant) {
  Rng rng(5);
  SetTransformer m(ModelConfig{});
  auto p = init_params(m.config(), 3);
  SlotMatrix z = random_scene_matrix(rng, 5);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  SlotMatrix zp(10);
  for (std::size_t k = 0; k < 10; ++k) std::copy(z.row(perm[k]).begin(), z.row(perm[k]).end(), zp.row(k).begin());
  Explanation a = symbolic_explanation(m, p, z, 0, 40);
  Explanation b = symbolic_explanation(m, p, zp, 0, 40);
  for (std::size_t k = 0; k < 10; ++k) {
    for (std::size_t d = 0; d < kObjectWidth; ++d) EXPECT_NEAR(b.values(k, d), a.values(perm[k], d), 1e-10);
  }
}

TEST(IntegratedGradients, RefiningStepsConverges) {
  Rng rng(6);
  SetTransformer m(ModelConfig{});
  auto p = init_params(m.config(), 4);
  SlotMatrix z = random_scene_matrix(rng, 6);
  auto ig = [&](std::size_t steps) { return symbolic_explanation(m, p, z, 2, steps).raw_ig.values(); };
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a[i] - b[i]));
    return s;
  };
  auto i10 = ig(10), i20 = ig(20), i40 = ig(40);
  EXPECT_LT(dist(i20, i40), dist(i10, i20));
}

TEST(IntegratedGradients, GraphVersionMatchesAndDifferentiates) {
  Rng rng(7);
  SetTransformer m(tiny());
  auto params = init_params(m.config(), 5);
  std::vector<SlotMatrix> zs{random_scene_matrix(rng, 3), random_scene_matrix(rng, 5)};
  Tensor z = stack_slots(zs);
  std::vector<std::size_t> t{1, 2};
  Tensor plain = integrated_gradients(m, params, z, t, 6);
  Var g = integrated_gradients_graph(m, bind(params, true), z, t, 6);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(g.value()[i], plain[i], 1e-12);

  Tensor target = random_tensor(z.shape(), rng, 0, 1);
  auto loss = [&](const std::vector<Var>& leaves) {
    ParamVars pv;
    pv.names = params.names();
    for (std::size_t i = 0; i < leaves.size(); ++i) pv.index[pv.names[i]] = i;
    pv.vars = leaves;
    Var ig = integrated_gradients_graph(m, pv, z, t, 6);
    return ad::sum_all(ad::square(ad::sub(ig, Var::constant(target))));
  };
  EXPECT_LT(testing_support::fd_max_rel_error(loss, params.tensors(), rng, 8), 1e-4);
}

TEST(Explanation, Normalization) {
  SlotMatrix raw(3);
  raw(0, 0) = -2.0;
  raw(1, 4) = 1.0;
  raw(2, dim("color:gray")) = 4.0;
  raw(2, 0) = 2.0;
  Explanation e = make_explanation(raw, 0);
  EXPECT_EQ(e.values(2, dim("color:gray")), 1.0);
  EXPECT_EQ(e.values(2, 0), 0.5);
  EXPECT_EQ(e.values(1, 4), 0.25);
  EXPECT_EQ(e.values(0, 0), 0.0);
  EXPECT_EQ(e.raw_ig(0, 0), -2.0);

  SlotMatrix negative(2);
  negative(0, 1) = -1.0;
  Explanation none = make_explanation(negative, 0);
  for (double v : none.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(Explanation, GraphNormalizationMatches) {
  Rng rng(8);
  Tensor ig = random_tensor({3, 4, 5}, rng);
  for (std::size_t i = 0; i < 20; ++i) ig[40 + i] = -std::abs(ig[40 + i]);  // third sample all negative
  Var v = normalize_positive_graph(Var::constant(ig));
  for (std::size_t b = 0; b < 3; ++b) {
    SlotMatrix raw(4, 5);
    std::copy_n(ig.data() + b * 20, 20, raw.values().begin());
    SlotMatrix want = normalize_positive(raw);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(v.value()[b * 20 + i], want.values()[i], 1e-15);
  }
}

TEST(Explanation, RelevantSlots) {
  SlotMatrix v(4);
  v(0, 3) = 0.9;
  v(1, 7) = 0.2;
  v(2, 0) = 0.6;
  Explanation e;
  e.values = v;
  EXPECT_EQ(relevant_slots(e, 0.5), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(relevant_slots(e, 0.0), (std::vector<std::size_t>{0, 1, 2}));
  e.values(2, 0) = 1.0;
  EXPECT_EQ(relevant_slots(e, 1.0), (std::vector<std::size_t>{2}));
}

TEST(GroundTruth, LargeCubeAndCylinder) {
  auto spec = clevr_hans3_spec();
  SlotMatrix z = slots_of({obj("sphere", "small", "red", "rubber"), obj("cylinder", "large", "blue", "metal"),
                           obj("cube", "large", "gray", "rubber")});
  SlotMatrix gt = ground_truth_explanation(z, spec.classes[0].true_rule);
  double ones = 0;
  for (double x : gt.values()) ones += x;
  EXPECT_EQ(ones, 4.0);
  EXPECT_EQ(gt(2, dim("shape:cube")), 1.0);
  EXPECT_EQ(gt(2, dim("size:large")), 1.0);
  EXPECT_EQ(gt(2, dim("color:gray")), 0.0);
  EXPECT_EQ(gt(1, dim("shape:cylinder")), 1.0);
  EXPECT_EQ(gt(1, dim("size:large")), 1.0);
  // The confounded train rule also names gray.
  EXPECT_EQ(ground_truth_explanation(z, spec.classes[0].rule(Split::kTrain))(2, dim("color:gray")), 1.0);
  // No match, no marks.
  SlotMatrix none = ground_truth_explanation(z, spec.classes[2].true_rule);
  for (double x : none.values()) EXPECT_EQ(x, 0.0);
}

TEST(GroundTruth, RelationsAndRegions) {
  auto spec = clevr_hans7_spec();
  SlotMatrix z = slots_of({obj("cube", "small", "red", "rubber", {0.5, 0.5, 0.8}),
                           obj("cube", "small", "cyan", "rubber", {0.2, 0.5, 0.1}),
                           obj("sphere", "large", "red", "metal", {0.9, 0.5, 0.6})});
  SlotMatrix gt = ground_truth_explanation(z, spec.classes[2].true_rule);
  for (std::size_t k : {0u, 1u, 2u}) EXPECT_EQ(gt(k, dim("pos:z")), 1.0) << k;
  EXPECT_EQ(gt(1, dim("color:cyan")), 1.0);
  EXPECT_EQ(gt(0, dim("color:red")), 1.0);
  EXPECT_EQ(gt(2, dim("color:red")), 1.0);
  EXPECT_EQ(gt(0, dim("shape:cube")), 0.0);

  std::vector<SceneObject> objs;
  for (double x : {0.1, 0.2, 0.3}) objs.push_back(obj("sphere", "small", "red", "rubber", {x, 0.5, 0.5}));
  SlotMatrix left = slots_of(objs);
  SlotMatrix g5 = ground_truth_explanation(left, spec.classes[4].true_rule);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(g5(k, dim("shape:sphere")), 1.0);
    EXPECT_EQ(g5(k, dim("pos:x")), 1.0);
    EXPECT_EQ(g5(k, dim("pos:z")), 0.0);
  }
  for (double x : {0.6, 0.7, 0.9}) objs.push_back(obj("cylinder", "large", "gray", "metal", {x, 0.2, 0.5}));
  SlotMatrix both = ground_truth_explanation(slots_of(objs), spec.classes[4].true_rule);
  for (std::size_t k = 3; k < 6; ++k) EXPECT_EQ(both(k, dim("material:metal")), 1.0);
}

TEST(GroundTruth, BinaryAndOnMatchedSlotsOnly) {
  Rng rng(9);
  for (const auto& r : testing_support::all_builtin_rules()) {
    for (int i = 0; i < 50; ++i) {
      SlotMatrix z = random_scene_matrix(rng, 8);
      SlotMatrix gt = ground_truth_explanation(z, r);
      for (std::size_t k = 0; k < 10; ++k) {
        for (double x : gt.row(k)) EXPECT_TRUE(x == 0.0 || x == 1.0);
        if (z.row_is_zero(k)) {
          for (double x : gt.row(k)) EXPECT_EQ(x, 0.0);
        }
      }
    }
  }
}

TEST(L1, Examples) {
  SlotMatrix gt(2), e(2);
  EXPECT_EQ(explanation_l1(gt, e, L1Mode::kAll), 0.0);
  gt(0, 0) = gt(0, 3) = gt(1, 5) = gt(1, 13) = 1.0;
  EXPECT_EQ(explanation_l1(gt, gt, L1Mode::kAll), 0.0);
  EXPECT_EQ(explanation_l1(gt, gt, L1Mode::kTruePositive), 0.0);
  EXPECT_EQ(explanation_l1(gt, e, L1Mode::kAll), 4.0);
  EXPECT_EQ(explanation_l1(gt, e, L1Mode::kTruePositive), 4.0);
  SlotMatrix zero(2), mass(2);
  mass(0, 1) = 1.0;
  mass(1, 2) = 0.75;
  mass(1, 9) = 0.75;
  EXPECT_DOUBLE_EQ(explanation_l1(zero, mass, L1Mode::kAll), 2.5);
  EXPECT_EQ(explanation_l1(zero, mass, L1Mode::kTruePositive), 0.0);
  EXPECT_THROW(explanation_l1(SlotMatrix(2), SlotMatrix(3), L1Mode::kAll), ShapeMismatch);
}

TEST(L1, Aggregates) {
  std::vector<double> one{3.5};
  std::vector<std::size_t> l1{1};
  auto a = aggregate_l1(one, l1, 3);
  EXPECT_EQ(a.global, 3.5);
  EXPECT_EQ(a.per_class[1], 3.5);
  std::vector<double> errs{1, 3, 4, 4};
  std::vector<std::size_t> labels{0, 0, 1, 1};
  auto b = aggregate_l1(errs, labels, 2);
  EXPECT_EQ(b.per_class[0], 2.0);
  EXPECT_EQ(b.per_class[1], 4.0);
  EXPECT_EQ(b.global, 3.0);
  EXPECT_EQ(b.counts, (std::vector<std::size_t>{2, 2}));
}

TEST(L1, DatasetAggregateUsesTrueRules) {
  auto spec = clevr_hans3_spec();
  spec.per_class_counts = {1, 1, 4};
  Dataset ds = generate_dataset(spec);
  SetTransformer m(tiny());
  auto p = init_params(m.config(), 0);
  L1Report r = aggregate_l1(ds, spec, m, p, Split::kTest, 0, 5, 5);
  EXPECT_EQ(r.all.counts, (std::vector<std::size_t>{4, 4, 4}));
  // Every test scene has a rule match, so the tp error counts each GT one
  // that the explanation misses; it is bounded by the all-mode error.
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_GT(r.true_positive.per_class[c], 0.0);
    EXPECT_LE(r.true_positive.per_class[c], r.all.per_class[c]);
  }
}

TEST(Encoding, StableAcrossCalls) {
  auto spec = clevr_hans3_spec();
  spec.per_class_counts = {2, 1, 1};
  Dataset ds = generate_dataset(spec);
  const auto& sc = ds.scenes[0];
  EXPECT_EQ(encode_for_model(sc, 7), encode_for_model(sc, 7));
  SlotMatrix a = encode_for_model(sc, 7);
  SlotObjects so = slot_objects(a);
  ASSERT_EQ(so.objects.size(), sc.objects.size());
  // Decoding the slots recovers the scene's objects as a multiset.
  auto key = [](const SceneObject& o) { return std::tuple(o.shape, o.size, o.color, o.material, o.pos); };
  std::vector<decltype(key(sc.objects[0]))> x, y;
  for (const auto& o : so.objects) x.push_back(key(o));
  for (const auto& o : sc.objects) y.push_back(key(o));
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  EXPECT_EQ(x, y);
}
