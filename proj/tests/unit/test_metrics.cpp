#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sidial/metrics.hpp"

using namespace sidial;
using metrics::Protocol;

namespace {

std::vector<metrics::ScoredScene> to_scored(const std::vector<oracle::Scene>& scenes) {
  std::vector<metrics::ScoredScene> out;
  for (const auto& s : scenes) out.push_back({s.prediction, s.truth});
  return out;
}

/// Prediction that puts all mass on the GT labels and GT predicates (one per pair).
metrics::ScoredScene perfect(std::size_t n, std::size_t C, std::size_t P, std::mt19937_64& rng) {
  metrics::ScoredScene s;
  std::uniform_real_distribution<double> u(0.0, 0.7);
  for (std::size_t i = 0; i < n; ++i) {
    s.truth.boxes.push_back({u(rng), u(rng), 0.2, 0.2});
    s.truth.labels.push_back(rng() % C);
  }
  s.prediction.boxes = s.truth.boxes;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d(C, 0.0);
    d[s.truth.labels[i]] = 1.0;
    s.prediction.object_label_dist.push_back(d);
  }
  std::vector<double> bg(P, 0.0);
  bg[0] = 1.0;
  s.prediction.predicate_dist.assign(n * n, bg);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && rng() % 2) {
        const std::size_t p = 1 + rng() % (P - 1);
        s.truth.relations.push_back({i, p, j});
        std::vector<double> d(P, 0.0);
        d[p] = 1.0;
        s.prediction.predicate_dist[i * n + j] = d;
      }
  return s;
}

}  // namespace

TEST(MeanRecall, PerfectPredictionScoresOne) {
  std::mt19937_64 rng(1);
  std::vector<metrics::ScoredScene> scenes;
  for (int k = 0; k < 10; ++k) scenes.push_back(perfect(4, 3, 4, rng));
  for (auto p : metrics::kProtocols)
    for (std::size_t k : metrics::kRecallKs) EXPECT_DOUBLE_EQ(metrics::mean_recall(scenes, p, k, 4), 1.0);
}

TEST(MeanRecall, ZeroKScoresZero) {
  std::mt19937_64 rng(2);
  std::vector<metrics::ScoredScene> scenes{perfect(4, 3, 4, rng), perfect(3, 3, 4, rng)};
  EXPECT_EQ(metrics::mean_recall(scenes, Protocol::kPredCls, 0, 4), 0.0);
}

TEST(MeanRecall, HandExample) {
  // two predicate classes; class 1 has 2 GT triples with 1 hit, class 2 has 2 with none
  metrics::ScoredScene s;
  s.truth.boxes = {core::make_box(0, 0, 0.2, 0.2), core::make_box(0.5, 0, 0.2, 0.2), core::make_box(0, 0.5, 0.2, 0.2)};
  s.truth.labels = {0, 1, 0};
  s.truth.relations = {{0, 1, 1}, {1, 1, 2}, {0, 2, 2}, {2, 2, 1}};
  s.prediction.boxes = s.truth.boxes;
  s.prediction.object_label_dist = {{1, 0}, {0, 1}, {1, 0}};
  s.prediction.predicate_dist.assign(9, {1, 0, 0});
  s.prediction.predicate_dist[0 * 3 + 1] = {0, 1, 0};      // hit (0 p1 1)
  s.prediction.predicate_dist[1 * 3 + 2] = {0.1, 0, 0.9};  // wrong predicate for (1 p1 2)
  s.prediction.predicate_dist[0 * 3 + 2] = {0.1, 0.9, 0};  // wrong predicate for (0 p2 2)
  // class 1 recall 1/2, class 2 recall 0 -> mR = 0.25
  EXPECT_DOUBLE_EQ(metrics::mean_recall({s}, Protocol::kPredCls, 20, 3), 0.25);
  EXPECT_DOUBLE_EQ(metrics::mean_recall({s}, Protocol::kSgCls, 20, 3), 0.25);
  // K = 1 keeps only the top triple, which is the hit
  EXPECT_DOUBLE_EQ(metrics::mean_recall({s}, Protocol::kSgCls, 1, 3), 0.25);
  // a wrong label on object 1 removes the hit under sgcls only
  s.prediction.object_label_dist[1] = {0.6, 0.4};
  EXPECT_DOUBLE_EQ(metrics::mean_recall({s}, Protocol::kSgCls, 20, 3), 0.0);
}

TEST(MeanRecall, MatchesBruteForceOracle) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 300; ++t) {
    const auto protocol = metrics::kProtocols[static_cast<std::size_t>(t) % 3];
    const std::size_t P = 2 + rng() % 3;
    const auto corpus = oracle::random_corpus(rng, protocol, 4, P, 3, 5);
    for (std::size_t k : {1u, 2u, 3u, 5u, 20u})
      EXPECT_EQ(metrics::mean_recall(to_scored(corpus), protocol, k, P), oracle::mean_recall(corpus, protocol, k, P))
          << "trial " << t << " k " << k;
  }
}

TEST(MeanRecall, MonotoneInK) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto corpus = to_scored(oracle::random_corpus(rng, Protocol::kSgCls, 5, 4, 3, 5));
    double prev = 0.0;
    for (std::size_t k = 0; k <= 25; ++k) {
      const double v = metrics::mean_recall(corpus, Protocol::kSgCls, k, 4);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(MeanRecall, ProtocolMismatchIsAnError) {
  std::mt19937_64 rng(5);
  auto s = perfect(3, 3, 4, rng);
  auto moved = s;
  moved.prediction.boxes[0].x += 0.01;
  EXPECT_THROW(metrics::mean_recall({moved}, Protocol::kSgCls, 20, 4), Error);
  EXPECT_NO_THROW(metrics::mean_recall({moved}, Protocol::kSgDet, 20, 4));
  auto soft = s;
  soft.prediction.object_label_dist[0] = {0.5, 0.25, 0.25};
  EXPECT_THROW(metrics::mean_recall({soft}, Protocol::kPredCls, 20, 4), Error);
}

TEST(MeanRecall, ScenesWithoutRelationsAreExcluded) {
  std::mt19937_64 rng(6);
  auto a = perfect(4, 3, 4, rng);
  auto empty = perfect(1, 3, 4, rng);
  ASSERT_TRUE(empty.truth.relations.empty());
  const auto agg = metrics::aggregate_recall({a, empty, empty}, Protocol::kSgCls, 20, 4);
  EXPECT_EQ(agg.excluded_scenes, 2u);
  EXPECT_EQ(metrics::mean_recall({a, empty}, Protocol::kSgCls, 20, 4), metrics::mean_recall({a}, Protocol::kSgCls, 20, 4));
  EXPECT_EQ(metrics::mean_recall({empty}, Protocol::kSgCls, 20, 4), 0.0);
}

TEST(MeanRecall, ProtocolOrderingUnderDegradation) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    // predcls: GT boxes + one-hot labels; sgcls: same predicates, noisy labels; sgdet: sgcls plus shifted boxes
    auto corpus = oracle::random_corpus(rng, Protocol::kPredCls, 4, 4, 3, 5);
    auto predcls = to_scored(corpus);
    auto sgcls = predcls;
    for (auto& s : sgcls)
      for (auto& d : s.prediction.object_label_dist)
        if (u(rng) < 0.4) std::rotate(d.begin(), d.begin() + 1, d.end());
    // premise: a predicted box matches its own GT box or none, so distinct GT boxes must not match each other
    bool separable = true;
    for (const auto& s : predcls)
      for (std::size_t i = 0; i < s.truth.boxes.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) separable = separable && core::iou(s.truth.boxes[i], s.truth.boxes[j]) < 0.5;
    if (!separable) continue;
    auto sgdet = sgcls;
    for (auto& s : sgdet)
      for (auto& b : s.prediction.boxes) {
        if (u(rng) >= 0.4) continue;
        auto moved = b;
        moved.x = b.x > 0.5 ? 0.0 : 1.0 - b.w;
        bool lost = true;
        for (const auto& g : s.truth.boxes) lost = lost && core::iou(moved, g) < 0.5;
        if (lost) b = moved;
      }
    for (std::size_t k : {1u, 5u, 20u}) {
      const double a = metrics::mean_recall(predcls, Protocol::kPredCls, k, 4);
      const double b = metrics::mean_recall(sgcls, Protocol::kSgCls, k, 4);
      const double c = metrics::mean_recall(sgdet, Protocol::kSgDet, k, 4);
      EXPECT_GE(a, b);
      EXPECT_GE(b, c);
    }
  }
}

TEST(Report, JsonSchema) {
  std::mt19937_64 rng(8);
  core::Vocabulary vocab{{"a", "b", "c"}, {core::Vocabulary::kBackground, "p1", "p2", "p3"}};
  std::vector<metrics::ScoredScene> scenes{perfect(4, 3, 4, rng), perfect(3, 3, 4, rng)};
  metrics::MetricsReport r;
  for (auto p : metrics::kProtocols) metrics::add_protocol(r, scenes, p, 4);
  EXPECT_NO_THROW(r.validate());
  const auto j = metrics::to_json(r, vocab);
  EXPECT_NO_THROW(metrics::validate_report_json(j));
  EXPECT_EQ(j["sgcls"]["mR@20"].get<double>(), 1.0);
  EXPECT_TRUE(j["predcls"]["per_predicate@50"].contains("p2"));
  auto broken = j;
  broken["sgdet"].erase("mR@100");
  EXPECT_THROW(metrics::validate_report_json(broken), Error);
  broken = j;
  broken["predcls"]["mR@20"] = 1.5;
  EXPECT_THROW(metrics::validate_report_json(broken), Error);
  broken = j;
  broken.erase("sgcls");
  EXPECT_THROW(metrics::validate_report_json(broken), Error);
}

TEST(Protocol, NamesRoundTrip) {
  for (auto p : metrics::kProtocols) EXPECT_EQ(metrics::protocol_from_string(metrics::to_string(p)), p);
  EXPECT_THROW(metrics::protocol_from_string("sgdet2"), Error);
}
