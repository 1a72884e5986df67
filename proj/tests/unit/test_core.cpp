#include <gtest/gtest.h>

#include <random>

#include "sidial/core.hpp"
#include "sidial/json_io.hpp"

using namespace sidial;
using core::BoundingBox;

TEST(Iou, IdenticalBoxesGiveOne) {
  const auto a = core::make_box(0.1, 0.1, 0.3, 0.3);
  EXPECT_EQ(core::iou(a, a), 1.0);
}

TEST(Iou, DisjointBoxesGiveZero) {
  EXPECT_EQ(core::iou(core::make_box(0, 0, 0.2, 0.2), core::make_box(0.5, 0.5, 0.2, 0.2)), 0.0);
}

TEST(Iou, QuarterOverlapIsOneSeventh) {
  // overlap 0.25 x 0.25, union 0.25 + 0.25 - 0.0625
  const double expected = 0.0625 / (0.25 + 0.25 - 0.0625);
  EXPECT_NEAR(core::iou(core::make_box(0, 0, 0.5, 0.5), core::make_box(0.25, 0.25, 0.5, 0.5)), expected, 1e-12);
  EXPECT_NEAR(expected, 1.0 / 7.0, 1e-12);
}

TEST(Iou, SymmetricAndBoundedOnRandomBoxes) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 2000; ++t) {
    const double w1 = 0.01 + 0.5 * u(rng), h1 = 0.01 + 0.5 * u(rng), w2 = 0.01 + 0.5 * u(rng), h2 = 0.01 + 0.5 * u(rng);
    const BoundingBox a{u(rng) * (1 - w1), u(rng) * (1 - h1), w1, h1};
    const BoundingBox b{u(rng) * (1 - w2), u(rng) * (1 - h2), w2, h2};
    const double v = core::iou(a, b);
    EXPECT_EQ(v, core::iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    const BoundingBox un = core::union_box(a, b);
    EXPECT_TRUE(un.contains(a));
    EXPECT_TRUE(un.contains(b));
    EXPECT_EQ(un, core::union_box(b, a));
  }
}

TEST(UnionBox, Examples) {
  const auto a = core::make_box(0.1, 0.1, 0.2, 0.2);
  EXPECT_EQ(core::union_box(a, a), a);
  const auto full = core::union_box(core::make_box(0, 0, 0.2, 0.2), core::make_box(0.8, 0.8, 0.2, 0.2));
  EXPECT_NEAR(full.x, 0.0, 1e-12);
  EXPECT_NEAR(full.y, 0.0, 1e-12);
  EXPECT_NEAR(full.w, 1.0, 1e-12);
  EXPECT_NEAR(full.h, 1.0, 1e-12);
  const auto u = core::union_box(a, core::make_box(0.2, 0.3, 0.3, 0.1));
  EXPECT_NEAR(u.x, 0.1, 1e-12);
  EXPECT_NEAR(u.y, 0.1, 1e-12);
  EXPECT_NEAR(u.w, 0.4, 1e-12);
  EXPECT_NEAR(u.h, 0.3, 1e-12);
}

TEST(UnionBox, IdempotentUnderContainment) {
  const auto outer = core::make_box(0.1, 0.1, 0.6, 0.6);
  const auto inner = core::make_box(0.2, 0.3, 0.1, 0.1);
  EXPECT_EQ(core::union_box(outer, inner), outer);
  EXPECT_EQ(core::union_box(inner, outer), outer);
}

TEST(BoundingBox, InvalidBoxesRejected) {
  EXPECT_THROW(core::make_box(0.9, 0.0, 0.2, 0.1), Error);
  EXPECT_THROW(core::make_box(0.0, 0.0, 0.0, 0.1), Error);
  EXPECT_THROW(core::make_box(-0.1, 0.0, 0.2, 0.1), Error);
  EXPECT_NO_THROW(core::make_box(0.0, 0.0, 1.0, 1.0));
}

TEST(Vocabulary, ValidationRules) {
  core::Vocabulary v{{"cube", "sphere"}, {core::Vocabulary::kBackground, "left_of"}};
  EXPECT_NO_THROW(v.validate());
  auto dup = v;
  dup.object_classes = {"cube", "cube"};
  EXPECT_THROW(dup.validate(), Error);
  auto nobg = v;
  nobg.predicate_classes = {"left_of", "near"};
  EXPECT_THROW(nobg.validate(), Error);
  auto twice = v;
  twice.predicate_classes = {core::Vocabulary::kBackground, core::Vocabulary::kBackground};
  EXPECT_THROW(twice.validate(), Error);
  auto one = v;
  one.object_classes = {"cube"};
  EXPECT_THROW(one.validate(), Error);
}

namespace {
core::SceneInstance tiny_scene() {
  core::SceneInstance s;
  s.scene_id = "t";
  s.feature_grid = core::FeatureGrid(2, 3, 2);
  for (std::size_t k = 0; k < s.feature_grid.data().size(); ++k) s.feature_grid.data()[k] = 0.5 * static_cast<double>(k);
  s.objects = {{core::make_box(0.0, 0.0, 0.3, 0.3), 0}, {core::make_box(0.6, 0.5, 0.3, 0.4), 1}};
  s.relations = {{0, 1, 1}};
  s.qa_candidates = {{"what is the object at cell r0 c0", "cube", true, 0}, {"what is near the cone", "disk", false, {}}};
  return s;
}
const core::Vocabulary kVocab{{"cube", "sphere"}, {core::Vocabulary::kBackground, "left_of"}};
}  // namespace

TEST(SceneInstance, ValidSceneAccepted) { EXPECT_NO_THROW(tiny_scene().validate(kVocab, 5, 2)); }

TEST(SceneInstance, InvariantViolationsRejected) {
  auto s = tiny_scene();
  s.relations = {{0, 1, 7}};
  EXPECT_THROW(s.validate(kVocab), Error);
  s = tiny_scene();
  s.relations = {{0, 0, 1}};
  EXPECT_THROW(s.validate(kVocab), Error);
  s = tiny_scene();
  s.relations = {{1, 1, 1}};
  EXPECT_THROW(s.validate(kVocab), Error);
  s = tiny_scene();
  s.qa_candidates[0].answer_text = "sphere";
  EXPECT_THROW(s.validate(kVocab), Error);
  s = tiny_scene();
  s.objects.clear();
  s.relations.clear();
  s.qa_candidates.clear();
  EXPECT_THROW(s.validate(kVocab), Error);
  EXPECT_THROW(tiny_scene().validate(kVocab, 1), Error);
  EXPECT_THROW(tiny_scene().validate(kVocab, 0, 100), Error);
}

TEST(SceneInstance, JsonRoundTrip) {
  const auto s = tiny_scene();
  const auto j = io::to_json(s);
  for (const char* key : {"scene_id", "feature_grid", "objects", "relations", "qa_candidates"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(io::scene_from_json(io::json::parse(j.dump())), s);
}

TEST(SceneGraphPrediction, RowStochasticityOnRandomLogits) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 3.0);
  auto softmax = [&](std::size_t w) {
    std::vector<double> v(w);
    double z = 0.0;
    for (auto& x : v) z += (x = std::exp(n(rng)));
    for (auto& x : v) x /= z;
    return v;
  };
  for (int t = 0; t < 100; ++t) {
    core::SceneGraphPrediction p;
    const std::size_t k = 1 + static_cast<std::size_t>(t % 4);
    for (std::size_t i = 0; i < k; ++i) {
      p.boxes.push_back(core::make_box(0.1, 0.1, 0.2, 0.2));
      p.object_label_dist.push_back(softmax(5));
    }
    for (std::size_t e = 0; e < k * k; ++e) p.predicate_dist.push_back(softmax(3));
    EXPECT_NO_THROW(p.validate());
  }
  core::SceneGraphPrediction bad;
  bad.boxes = {core::make_box(0.1, 0.1, 0.2, 0.2)};
  bad.object_label_dist = {{0.5, 0.6}};
  bad.predicate_dist = {{1.0}};
  EXPECT_THROW(bad.validate(), Error);
}
