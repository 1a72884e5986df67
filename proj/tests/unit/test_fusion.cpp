#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sidial/fusion.hpp"

using namespace sidial;
using ad::Mat;

namespace {

dialog::DialogState finished_dialog(std::size_t rounds, Eigen::Index d_h, std::mt19937_64& rng) {
  auto s = dialog::DialogState::initial(static_cast<std::size_t>(d_h));
  for (std::size_t r = 0; r < rounds; ++r) {
    dialog::EncodedQA qa{ad::RowVec::Zero(4), ad::RowVec::Zero(4), ad::random_matrix(1, d_h, 1.0, rng)};
    s.selected.emplace_back(r, qa);
  }
  s.history = ad::random_matrix(1, d_h, 1.0, rng);
  s.round = rounds;
  return s;
}

}  // namespace

TEST(Attention, SingleSlotReturnsItsValue) {
  std::mt19937_64 rng(1);
  const Mat q = ad::random_matrix(3, 4, 1.0, rng), k = ad::random_matrix(1, 4, 1.0, rng);
  const Mat v = ad::random_matrix(1, 5, 1.0, rng);
  const Mat out = fusion::attention(q, k, v);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_TRUE(out.row(i).isApprox(v.row(0), 1e-15));
  EXPECT_THROW(fusion::attention(q, Mat(0, 4), Mat(0, 5)), Error);
}

TEST(Attention, IdenticalKeysAverageValues) {
  std::mt19937_64 rng(2);
  const Mat q = ad::random_matrix(2, 4, 1.0, rng);
  const Mat k = ad::random_matrix(1, 4, 1.0, rng).replicate(6, 1);
  const Mat v = ad::random_matrix(6, 3, 1.0, rng);
  const Mat out = fusion::attention(q, k, v);
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_TRUE(out.row(i).isApprox(v.colwise().mean(), 1e-12));
}

TEST(Attention, MatchesDirectFormula) {
  std::mt19937_64 rng(3);
  const Mat q = ad::random_matrix(2, 4, 1.0, rng), k = ad::random_matrix(5, 4, 1.0, rng);
  const Mat v = ad::random_matrix(5, 3, 1.0, rng);
  const Mat out = fusion::attention(q, k, v);
  for (Eigen::Index i = 0; i < 2; ++i) {
    Eigen::VectorXd w(5);
    for (Eigen::Index j = 0; j < 5; ++j) w(j) = std::exp(q.row(i).dot(k.row(j)) / 2.0);
    w /= w.sum();
    EXPECT_TRUE(out.row(i).isApprox(w.transpose() * v, 1e-12));
  }
}

TEST(Attention, WeightsAreConvex) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    ad::Tape tape;
    const auto m = 1 + t % 7;
    const Mat v = ad::random_matrix(m, 3, 2.0, rng);
    const auto r = fusion::attention_graph(tape.constant(ad::random_matrix(4, 5, 3.0, rng)),
                                           tape.constant(ad::random_matrix(m, 5, 3.0, rng)), tape.constant(v));
    const Mat& w = r.weights.value();
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-12);
      EXPECT_GE(w.row(i).minCoeff(), 0.0);
      // convex combination: every coordinate within the per-column range of the values
      for (Eigen::Index c = 0; c < v.cols(); ++c) {
        EXPECT_GE(r.attended.value()(i, c), v.col(c).minCoeff() - 1e-12);
        EXPECT_LE(r.attended.value()(i, c), v.col(c).maxCoeff() + 1e-12);
      }
    }
  }
}

TEST(UpdateVision, ZeroUpdateIsExactIdentity) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 2u, 5u}) {
    const auto o = fixture::random_objects(n, 12, rng);
    fusion::FusionParams p(12, 8, {}, rng);
    p.zero_update();
    const auto out = fusion::update_vision(o, finished_dialog(10, 8, rng), p, 10);
    EXPECT_EQ(out.node_features, o.node_features);
    EXPECT_EQ(out.edge_features, o.edge_features);
    EXPECT_EQ(out.boxes, o.boxes);
  }
}

TEST(UpdateVision, ShapesKeptAndWeightsNormalized) {
  std::mt19937_64 rng(6);
  for (std::size_t n = 1; n <= 5; ++n) {
    const auto o = fixture::random_objects(n, 12, rng);
    fusion::FusionParams p(12, 8, {}, rng);
    const auto state = finished_dialog(10, 8, rng);
    const auto out = fusion::update_vision(o, state, p, 10);
    EXPECT_EQ(out.node_features.rows(), o.node_features.rows());
    EXPECT_EQ(out.node_features.cols(), o.node_features.cols());
    EXPECT_EQ(out.edge_features.rows(), o.edge_features.rows());
    EXPECT_NO_THROW(out.validate());
    ad::Tape tape;
    const auto g = fusion::update_vision_graph(tape, p, tape.constant(o.node_features), tape.constant(o.edge_features),
                                               tape.constant(fusion::dialog_memory(state)));
    EXPECT_EQ(g.node_weights.cols(), 11);
    for (Eigen::Index i = 0; i < g.node_weights.rows(); ++i) EXPECT_NEAR(g.node_weights.value().row(i).sum(), 1.0, 1e-6);
    for (Eigen::Index i = 0; i < g.edge_weights.rows(); ++i) EXPECT_NEAR(g.edge_weights.value().row(i).sum(), 1.0, 1e-6);
  }
}

TEST(UpdateVision, IncompleteDialogIsAnError) {
  std::mt19937_64 rng(7);
  const auto o = fixture::random_objects(3, 12, rng);
  fusion::FusionParams p(12, 8, {}, rng);
  EXPECT_THROW(fusion::update_vision(o, finished_dialog(9, 8, rng), p, 10), Error);
  EXPECT_THROW(fusion::FusionParams(12, 8, {0}, rng), Error);
}

TEST(UpdateVision, MemoryHoldsQaRowsThenHistory) {
  std::mt19937_64 rng(8);
  const auto s = finished_dialog(3, 4, rng);
  const Mat m = fusion::dialog_memory(s);
  ASSERT_EQ(m.rows(), 4);
  EXPECT_EQ(m.row(1), s.selected[1].second.x_qa);
  EXPECT_EQ(m.row(3), s.history);
}

TEST(FusionGradient, AttentionUpdateMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 5; ++t) {
    const auto o = fixture::random_objects(3, 6, rng);
    fusion::FusionParams p(6, 4, {5}, rng);
    for (auto* q : p.parameters()) q->value = ad::random_matrix(q->value.rows(), q->value.cols(), 0.7, rng);
    const Mat memory = ad::random_matrix(4, 4, 1.0, rng);
    const Mat pn = ad::random_matrix(3, 6, 1.0, rng), pe = ad::random_matrix(6, 6, 1.0, rng);
    const auto r = oracle::check_graph(p.parameters(), [&](ad::Tape& tape) {
      const auto g = fusion::update_vision_graph(tape, p, tape.constant(o.node_features), tape.constant(o.edge_features),
                                                 tape.constant(memory));
      return ad::add(ad::sum(ad::hadamard(g.nodes, tape.constant(pn))), ad::sum(ad::hadamard(g.edges, tape.constant(pe))));
    });
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}
