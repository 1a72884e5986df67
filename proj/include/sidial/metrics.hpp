#pragma once

// Mean Recall@K under the PredCls / SGCls / SGDet protocols.

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sidial/core.hpp"
#include "sidial/json_io.hpp"
#include "sidial/sgg.hpp"

namespace sidial::metrics {

enum class Protocol { kPredCls, kSgCls, kSgDet };

inline constexpr std::array<Protocol, 3> kProtocols{Protocol::kPredCls, Protocol::kSgCls, Protocol::kSgDet};
inline constexpr std::array<std::size_t, 3> kRecallKs{20, 50, 100};

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kPredCls: return "predcls";
    case Protocol::kSgCls: return "sgcls";
    case Protocol::kSgDet: return "sgdet";
  }
  return "predcls";
}

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "predcls") return Protocol::kPredCls;
  if (s == "sgcls") return Protocol::kSgCls;
  if (s == "sgdet") return Protocol::kSgDet;
  throw Error("config", "unknown protocol '" + s + "'");
}

inline constexpr double kMatchIou = 0.5;

/// Per-predicate hit and total counts; index 0 (background) is never populated.
struct RecallCounts {
  std::vector<std::size_t> hits;
  std::vector<std::size_t> totals;

  explicit RecallCounts(std::size_t num_predicates = 0) : hits(num_predicates, 0), totals(num_predicates, 0) {}

  RecallCounts& operator+=(const RecallCounts& o) {
    for (std::size_t k = 0; k < hits.size(); ++k) {
      hits[k] += o.hits[k];
      totals[k] += o.totals[k];
    }
    return *this;
  }

  /// Recall for classes with at least one GT instance.
  std::vector<std::optional<double>> recalls() const {
    std::vector<std::optional<double>> r(hits.size());
    for (std::size_t k = 1; k < hits.size(); ++k)
      if (totals[k] > 0) r[k] = static_cast<double>(hits[k]) / static_cast<double>(totals[k]);
    return r;
  }

  double mean() const {
    double s = 0.0;
    std::size_t m = 0;
    for (const auto& r : recalls())
      if (r) {
        s += *r;
        ++m;
      }
    return m ? s / static_cast<double>(m) : 0.0;
  }
};

/// Ground truth needed for matching.
struct GroundTruth {
  std::vector<core::BoundingBox> boxes;
  std::vector<std::size_t> labels;
  std::vector<core::RelationTriple> relations;

  static GroundTruth from_scene(const core::SceneInstance& s) {
    GroundTruth g;
    for (const auto& o : s.objects) {
      g.boxes.push_back(o.box);
      g.labels.push_back(o.class_index);
    }
    g.relations = s.relations;
    return g;
  }
};

inline bool node_matches(const core::SceneGraphPrediction& pred, std::size_t i, const GroundTruth& gt, std::size_t s,
                         Protocol protocol) {
  switch (protocol) {
    case Protocol::kPredCls: return i == s;
    case Protocol::kSgCls: return i == s && core::argmax(pred.object_label_dist[i]) == gt.labels[s];
    case Protocol::kSgDet:
      return core::iou(pred.boxes[i], gt.boxes[s]) >= kMatchIou && core::argmax(pred.object_label_dist[i]) == gt.labels[s];
  }
  return false;
}

/// Counts, per predicate class, the GT triples hit by any of the top-K ranked triples.
inline RecallCounts recall_at_k(const std::vector<sgg::RankedTriple>& ranked, const core::SceneGraphPrediction& pred,
                                const GroundTruth& gt, Protocol protocol, std::size_t k, std::size_t num_predicates) {
  RecallCounts c(num_predicates);
  const std::size_t top = std::min(k, ranked.size());
  for (const auto& r : gt.relations) {
    ++c.totals.at(r.predicate_index);
    for (std::size_t t = 0; t < top; ++t) {
      const auto& cand = ranked[t];
      if (cand.predicate == r.predicate_index && node_matches(pred, cand.subject, gt, r.subject_index, protocol) &&
          node_matches(pred, cand.object, gt, r.object_index, protocol)) {
        ++c.hits[r.predicate_index];
        break;
      }
    }
  }
  return c;
}

/// Throws when the prediction was not produced under the protocol's inputs.
inline void check_protocol_inputs(const core::SceneGraphPrediction& pred, const GroundTruth& gt, Protocol protocol) {
  if (protocol == Protocol::kSgDet) return;
  if (pred.boxes != gt.boxes)
    throw Error("protocol", to_string(protocol) + " predictions must use the ground-truth boxes");
  if (protocol == Protocol::kPredCls)
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const auto& d = pred.object_label_dist[i];
      if (d[gt.labels[i]] != 1.0) throw Error("protocol", "predcls predictions must carry one-hot ground-truth labels");
    }
}

struct ScoredScene {
  core::SceneGraphPrediction prediction;
  GroundTruth truth;
};

struct Aggregate {
  RecallCounts counts;
  std::size_t excluded_scenes = 0;  // scenes without GT relations
};

inline Aggregate aggregate_recall(const std::vector<ScoredScene>& scenes, Protocol protocol, std::size_t k,
                                  std::size_t num_predicates) {
  Aggregate a{RecallCounts(num_predicates), 0};
  for (const auto& s : scenes) {
    check_protocol_inputs(s.prediction, s.truth, protocol);
    if (s.truth.relations.empty()) {
      ++a.excluded_scenes;
      continue;
    }
    a.counts += recall_at_k(sgg::ranked_triples(s.prediction), s.prediction, s.truth, protocol, k, num_predicates);
  }
  return a;
}

/// Class hits and totals are summed over the corpus, then recalls averaged over present classes.
inline double mean_recall(const std::vector<ScoredScene>& scenes, Protocol protocol, std::size_t k,
                          std::size_t num_predicates) {
  return aggregate_recall(scenes, protocol, k, num_predicates).counts.mean();
}

struct MetricsReport {
  std::map<std::string, std::map<std::size_t, double>> mean_recall;  // protocol -> K -> mR
  std::map<std::string, std::map<std::size_t, std::vector<std::optional<double>>>> per_predicate;
  std::map<std::string, std::size_t> excluded_scenes;

  double at(Protocol p, std::size_t k) const { return mean_recall.at(to_string(p)).at(k); }

  void validate() const {
    for (const auto& [proto, byk] : mean_recall) {
      double prev = -1.0;
      for (const auto& [k, v] : byk) {
        if (!(v >= 0.0 && v <= 1.0)) throw Error("metrics", "mean recall outside [0, 1]");
        if (v < prev) throw Error("metrics", "mean recall decreases with K for " + proto);
        prev = v;
      }
    }
  }
};

inline void add_protocol(MetricsReport& report, const std::vector<ScoredScene>& scenes, Protocol protocol,
                         std::size_t num_predicates) {
  for (std::size_t k : kRecallKs) {
    const Aggregate a = aggregate_recall(scenes, protocol, k, num_predicates);
    report.mean_recall[to_string(protocol)][k] = a.counts.mean();
    report.per_predicate[to_string(protocol)][k] = a.counts.recalls();
    report.excluded_scenes[to_string(protocol)] = a.excluded_scenes;
  }
}

inline io::json to_json(const MetricsReport& r, const core::Vocabulary& vocab) {
  io::json j = io::json::object();
  for (const auto& [proto, byk] : r.mean_recall) {
    io::json pj = io::json::object();
    for (const auto& [k, v] : byk) {
      io::json per = io::json::object();
      const auto& rec = r.per_predicate.at(proto).at(k);
      for (std::size_t p = 1; p < rec.size(); ++p)
        per[vocab.predicate_classes.at(p)] = rec[p] ? io::json(*rec[p]) : io::json(nullptr);
      pj["mR@" + std::to_string(k)] = v;
      pj["per_predicate@" + std::to_string(k)] = std::move(per);
    }
    pj["excluded_scenes"] = r.excluded_scenes.at(proto);
    j[proto] = std::move(pj);
  }
  return j;
}

/// JSON schema check for serialized reports: every protocol x K present with a value in [0, 1].
inline void validate_report_json(const io::json& j) {
  for (Protocol p : kProtocols) {
    const std::string name = to_string(p);
    if (!j.contains(name) || !j[name].is_object()) throw Error("schema", "report lacks protocol " + name);
    for (std::size_t k : kRecallKs) {
      const std::string key = "mR@" + std::to_string(k);
      if (!j[name].contains(key) || !j[name][key].is_number()) throw Error("schema", name + "." + key + " missing");
      const double v = j[name][key].get<double>();
      if (!(v >= 0.0 && v <= 1.0)) throw Error("schema", name + "." + key + " outside [0, 1]");
      if (!j[name].contains("per_predicate@" + std::to_string(k))) throw Error("schema", name + " per-predicate missing");
    }
  }
}

}  // namespace sidial::metrics
