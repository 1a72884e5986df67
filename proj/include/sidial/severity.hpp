#pragma once

// Detector accuracy under a corruption, used to compare corruption severities.

#include <vector>

#include "sidial/missingness.hpp"
#include "sidial/perception.hpp"

namespace sidial::missingness {

inline double severity_probe(const std::vector<core::SceneInstance>& dataset, const CorruptionSpec& spec,
                             const perception::DetectorParams& detector) {
  if (!detector.trained) throw Error("detector", "severity probe requires a trained detector");
  spec.validate();
  std::vector<CorruptedScene> corrupted;
  corrupted.reserve(dataset.size());
  for (const auto& s : dataset) corrupted.push_back(apply(s, spec));
  return perception::label_accuracy(corrupted, detector);
}

}  // namespace sidial::missingness
