#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nesyxil/dataset.hpp"

using namespace nesyxil;

namespace {

DatasetSpec small(DatasetSpec spec, int train = 40, int val = 12, int test = 12) {
  spec.per_class_counts = {train, val, test};
  return spec;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nesyxil_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Specs, PresetCounts) {
  EXPECT_EQ(clevr_hans3_spec(Scale::kDesk).per_class_counts, (std::array<int, 3>{500, 150, 150}));
  EXPECT_EQ(clevr_hans3_spec(Scale::kFull).classes.size(), 3u);
  EXPECT_EQ(clevr_hans7_spec(Scale::kDesk).classes.size(), 7u);
  EXPECT_THROW(spec_by_name("ch5", Scale::kDesk, 0), FormatError);
}

TEST(Specs, ConfoundedClasses) {
  auto ch3 = clevr_hans3_spec();
  EXPECT_TRUE(ch3.classes[0].confounded());
  EXPECT_TRUE(ch3.classes[1].confounded());
  EXPECT_FALSE(ch3.classes[2].confounded());
  auto ch7 = clevr_hans7_spec();
  int n = 0;
  for (const auto& c : ch7.classes) n += c.confounded();
  EXPECT_EQ(n, 3);
  for (const auto& c : ch3.classes) EXPECT_EQ(c.rule(Split::kTest), c.true_rule);
}

TEST(Specs, ConfoundAttributes) {
  auto ch3 = clevr_hans3_spec();
  auto a = confound_attributes(ch3.classes[0]);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].clause, 0u);
  EXPECT_EQ(a[0].group, AttrGroup::kColor);
  a = confound_attributes(ch3.classes[1]);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].group, AttrGroup::kMaterial);
  EXPECT_TRUE(confound_attributes(ch3.classes[2]).empty());
}

TEST(ChiSquare, MatchesReferenceValues) {
  EXPECT_NEAR(chi_square_uniform_p({20, 10}), 0.06788915486182893, 1e-12);
  EXPECT_NEAR(chi_square_uniform_p({13, 7, 10, 10}), 0.6149349357825376, 1e-12);
  EXPECT_NEAR(chi_square_uniform_p({40, 0, 0, 0, 0, 0, 0, 0}), 1.1227554195722242e-56, 1e-66);
  EXPECT_DOUBLE_EQ(chi_square_uniform_p({5, 5, 5}), 1.0);
}

TEST(Generate, CountsAndIds) {
  auto spec = small(clevr_hans3_spec());
  Dataset ds = generate_dataset(spec);
  EXPECT_EQ(ds.scenes.size(), 3u * (40 + 12 + 12));
  EXPECT_EQ(ds.split(Split::kTrain).size(), 120u);
  EXPECT_EQ(ds.split(Split::kVal).size(), 36u);
  EXPECT_EQ(ds.split(Split::kTest).size(), 36u);
  EXPECT_EQ(ds.scenes.front().id, "ch3-train-c0-00000");
  ASSERT_NE(ds.find("ch3-test-c2-00011"), nullptr);
  EXPECT_EQ(ds.find("ch3-test-c2-00011")->class_label, 2);
  EXPECT_EQ(ds.find("nope"), nullptr);
}

TEST(Generate, SceneInvariants) {
  for (const auto& spec : {small(clevr_hans3_spec()), small(clevr_hans7_spec(), 20, 8, 8)}) {
    Dataset ds = generate_dataset(spec);
    for (const auto& sc : ds.scenes) {
      ASSERT_GE(sc.objects.size(), 3u);
      ASSERT_LE(sc.objects.size(), 10u);
      for (std::size_t i = 0; i < sc.objects.size(); ++i) {
        EXPECT_TRUE(sc.objects[i].valid());
        for (std::size_t j = 0; j < i; ++j) {
          const auto& a = sc.objects[i].pos;
          const auto& b = sc.objects[j].pos;
          EXPECT_GE(std::hypot(a[0] - b[0], a[1] - b[1]), spec.min_separation);
        }
      }
      const ClassSpec& cls = spec.classes[static_cast<std::size_t>(sc.class_label)];
      EXPECT_TRUE(satisfies_rule(sc, cls.rule(sc.split))) << sc.id;
      EXPECT_TRUE(foreign_matches(sc.objects, static_cast<std::size_t>(sc.class_label), sc.split, spec).empty())
          << sc.id;
    }
  }
}

TEST(Generate, Deterministic) {
  auto spec = small(clevr_hans7_spec(Scale::kDesk, 3), 10, 4, 4);
  Dataset a = generate_dataset(spec);
  Dataset b = generate_dataset(spec);
  ASSERT_EQ(a.scenes.size(), b.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) EXPECT_EQ(a.scenes[i].objects, b.scenes[i].objects);
  EXPECT_EQ(a.spec_hash, b.spec_hash);

  Dataset c = generate_dataset(small(clevr_hans7_spec(Scale::kDesk, 4), 10, 4, 4));
  EXPECT_NE(a.spec_hash, c.spec_hash);
  int same = 0;
  for (std::size_t i = 0; i < a.scenes.size(); ++i) same += a.scenes[i].objects == c.scenes[i].objects;
  EXPECT_EQ(same, 0);
}

TEST(Generate, ConfoundedTrainTestSplit) {
  auto spec = small(clevr_hans3_spec(), 60, 20, 60);
  Dataset ds = generate_dataset(spec);
  auto rep = verify_dataset(ds, spec);
  EXPECT_EQ(rep.exclusivity_violations, 0);
  EXPECT_EQ(rep.own_rule_violations, 0);
  EXPECT_TRUE(rep.balanced);
  EXPECT_DOUBLE_EQ(rep.confound_adherence[0][0], 1.0);
  EXPECT_DOUBLE_EQ(rep.confound_adherence[0][1], 1.0);
  // Test scenes draw the confound attribute freely, so most miss it.
  EXPECT_LT(rep.confound_adherence[0][2], 0.6);
  EXPECT_EQ(rep.alt_branch_fraction[0], -1.0);
  ASSERT_EQ(rep.test_histograms.size(), 2u);
  EXPECT_EQ(rep.test_histograms[0].counts.size(), kColors.size());
}

TEST(Generate, ExhaustedBudget) {
  auto spec = small(clevr_hans3_spec(), 2, 1, 1);
  // Every class-0 scene holds a large object.
  spec.classes[1] = patterns::unconfounded(ClassRule{{patterns::P().size("large")}, {}, {}, 0.0});
  spec.retry_budget = 5;
  EXPECT_THROW(generate_dataset(spec), GenerationExhausted);
}

TEST(Generate, MixtureBranchFrequency) {
  auto spec = small(clevr_hans7_spec(), 200, 50, 50);
  spec.classes.erase(spec.classes.begin(), spec.classes.begin() + 4);
  spec.classes.resize(2);
  Dataset ds = generate_dataset(spec);
  auto rep = verify_dataset(ds, spec);
  EXPECT_EQ(rep.exclusivity_violations, 0);
  EXPECT_NEAR(rep.alt_branch_fraction[0], 0.1, 0.05);
  EXPECT_EQ(rep.alt_branch_fraction[1], -1.0);
}

TEST(DatasetIo, RoundTrip) {
  auto spec = small(clevr_hans7_spec(), 5, 2, 2);
  Dataset ds = generate_dataset(spec);
  auto dir = temp_dir("roundtrip");
  write_dataset(dir, spec, ds);
  LoadedDataset back = read_dataset(dir);
  EXPECT_EQ(back.spec_name, "ch7");
  EXPECT_EQ(back.n_classes, 7);
  EXPECT_EQ(back.data.spec_hash, ds.spec_hash);
  ASSERT_EQ(back.data.scenes.size(), ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    EXPECT_EQ(back.data.scenes[i].id, ds.scenes[i].id);
    EXPECT_EQ(back.data.scenes[i].split, ds.scenes[i].split);
    EXPECT_EQ(back.data.scenes[i].class_label, ds.scenes[i].class_label);
    EXPECT_EQ(back.data.scenes[i].objects, ds.scenes[i].objects);
  }
  // Writing twice gives the same bytes.
  auto first = read_text(dir / "scenes.jsonl");
  write_dataset(dir, spec, back.data);
  EXPECT_EQ(read_text(dir / "scenes.jsonl"), first);

  DatasetSpec again = stored_spec(back);
  EXPECT_EQ(spec_hash(again), spec_hash(spec));
  EXPECT_EQ(again.per_class_counts, spec.per_class_counts);
  auto meta = nlohmann::json::parse(read_text(dir / "meta.json"));
  meta["seed"] = 99;
  write_text_atomic(dir / "meta.json", meta.dump());
  EXPECT_THROW(stored_spec(read_dataset(dir)), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, Errors) {
  auto dir = temp_dir("errors");
  EXPECT_THROW(read_dataset(dir), NotFound);
  auto spec = small(clevr_hans3_spec(), 2, 1, 1);
  write_dataset(dir, spec, generate_dataset(spec));
  auto meta = nlohmann::json::parse(read_text(dir / "meta.json"));
  meta["format_version"] = "99";
  write_text_atomic(dir / "meta.json", meta.dump());
  EXPECT_THROW(read_dataset(dir), FormatError);
  write_text_atomic(dir / "meta.json", "{\"format_version\":\"1\"}");
  EXPECT_THROW(read_dataset(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, RejectsUnknownAttributeValues) {
  auto j = nlohmann::json::parse(R"({"shape":"cone","size":"large","color":"red","material":"metal",
                                     "pos":[0.1,0.2,0.3]})");
  EXPECT_THROW(object_from_json(j), FormatError);
  j["shape"] = "cube";
  EXPECT_NO_THROW(object_from_json(j));
  j["pos"] = {0.1, 1.2, 0.3};
  EXPECT_THROW(object_from_json(j), FormatError);
}
