#pragma once

// Small scenes and object sets shared by the dialog, fusion and head tests.

#include <random>
#include <vector>

#include "sidial/datagen.hpp"
#include "sidial/missingness.hpp"
#include "sidial/perception.hpp"

namespace fixture {

using namespace sidial;

inline datagen::GenConfig small_gen(std::size_t scenes, std::uint64_t seed) {
  datagen::GenConfig cfg;
  cfg.scenes = scenes;
  cfg.seed = seed;
  return cfg;
}

/// O' on GT boxes of a corrupted scene, features only (no trained detector).
inline perception::PreliminaryObjectSet objects_of(const core::SceneInstance& s,
                                                   missingness::CorruptionKind kind = missingness::CorruptionKind::kSemanticMask) {
  return perception::detect(missingness::apply(s, {kind, kind == missingness::CorruptionKind::kSemanticMask ? 0.0 : 1.0}),
                            perception::DetectorParams{}, perception::BoxMode::kGroundTruth);
}

/// Random O' with n nodes of width d.
inline perception::PreliminaryObjectSet random_objects(std::size_t n, Eigen::Index d, std::mt19937_64& rng) {
  perception::PreliminaryObjectSet o;
  std::uniform_real_distribution<double> u(0.0, 0.7);
  for (std::size_t i = 0; i < n; ++i) o.boxes.push_back({u(rng), u(rng), 0.2, 0.2});
  o.pairs = perception::ordered_pairs(n);
  o.node_features = ad::random_matrix(static_cast<Eigen::Index>(n), d, 1.0, rng);
  o.edge_features = ad::random_matrix(static_cast<Eigen::Index>(o.pairs.size()), d, 1.0, rng);
  o.label_logits = ad::Mat::Zero(static_cast<Eigen::Index>(n), 1);
  return o;
}

}  // namespace fixture
