#pragma once

// Scene-graph heads: a frequency-prior head and a one-round message-passing
// context head, both producing SceneGraphPrediction, plus triple ranking.

#include <algorithm>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/core.hpp"
#include "sidial/perception.hpp"

namespace sidial::sgg {

using ad::Mat;
using ad::Tape;
using ad::Var;

enum class HeadKind { kFreq, kContext };

inline std::string to_string(HeadKind k) { return k == HeadKind::kFreq ? "freq" : "context"; }

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "freq") return HeadKind::kFreq;
  if (s == "context") return HeadKind::kContext;
  throw Error("config", "unknown sgg_head '" + s + "' (expected freq|context)");
}

/// Smoothed empirical P(predicate | subject class, object class), background included.
class FreqTable {
 public:
  FreqTable() = default;
  FreqTable(std::size_t num_classes, std::size_t num_predicates, double alpha)
      : c_(num_classes), p_(num_predicates), alpha_(alpha), counts_(num_classes * num_classes * num_predicates, 0.0) {
    if (!(alpha > 0.0)) throw Error("config", "frequency smoothing alpha must be > 0");
  }

  void observe(std::size_t subject_class, std::size_t predicate, std::size_t object_class, double count = 1.0) {
    counts_.at((subject_class * c_ + object_class) * p_ + predicate) += count;
  }

  double prob(std::size_t subject_class, std::size_t object_class, std::size_t predicate) const {
    const std::size_t base = (subject_class * c_ + object_class) * p_;
    double total = 0.0;
    for (std::size_t k = 0; k < p_; ++k) total += counts_[base + k];
    return (counts_[base + predicate] + alpha_) / (total + alpha_ * static_cast<double>(p_));
  }

  std::vector<double> row(std::size_t subject_class, std::size_t object_class) const {
    std::vector<double> r(p_);
    for (std::size_t k = 0; k < p_; ++k) r[k] = prob(subject_class, object_class, k);
    return r;
  }

  std::size_t num_classes() const { return c_; }
  std::size_t num_predicates() const { return p_; }
  double alpha() const { return alpha_; }
  const std::vector<double>& counts() const { return counts_; }
  std::vector<double>& counts() { return counts_; }

 private:
  std::size_t c_ = 0, p_ = 0;
  double alpha_ = 1.0;
  std::vector<double> counts_;
};

/// Counts every GT triple; ordered pairs with no relation count as background.
inline FreqTable fit_freq_table(const std::vector<core::SceneInstance>& dataset, const core::Vocabulary& vocab,
                                double alpha) {
  if (dataset.empty()) throw Error("sgg", "cannot fit a frequency table on an empty dataset");
  FreqTable t(vocab.num_objects(), vocab.num_predicates(), alpha);
  for (const auto& s : dataset) {
    const std::size_t n = s.objects.size();
    std::vector<bool> related(n * n, false);
    for (const auto& r : s.relations) {
      t.observe(s.objects[r.subject_index].class_index, r.predicate_index, s.objects[r.object_index].class_index);
      related[r.subject_index * n + r.object_index] = true;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && !related[i * n + j]) t.observe(s.objects[i].class_index, 0, s.objects[j].class_index);
  }
  return t;
}

struct HeadConfig {
  std::size_t context_width = 16;
  std::size_t predicate_hidden = 32;
  double freq_alpha = 1.0;
};

struct HeadParams {
  HeadKind kind = HeadKind::kContext;
  std::size_t num_classes = 0;
  std::size_t num_predicates = 0;
  // context head
  ad::Linear message_self;      // d -> c
  ad::Linear message_neighbor;  // d -> c (no bias)
  ad::Linear object_classifier; // context: d + c -> |C|; freq: d -> |C|
  ad::Linear predicate_hidden;  // 2(d + c) + d -> hidden
  ad::Linear predicate_out;     // hidden -> |P|
  // freq head
  FreqTable table;

  HeadParams() = default;
  HeadParams(HeadKind k, Eigen::Index d, std::size_t classes, std::size_t predicates, const HeadConfig& cfg,
             std::mt19937_64& rng)
      : kind(k), num_classes(classes), num_predicates(predicates) {
    const auto C = static_cast<Eigen::Index>(classes), P = static_cast<Eigen::Index>(predicates);
    if (k == HeadKind::kContext) {
      const auto c = static_cast<Eigen::Index>(cfg.context_width);
      const auto hidden = static_cast<Eigen::Index>(cfg.predicate_hidden);
      message_self = ad::Linear("head.message_self", d, c, rng);
      message_neighbor = ad::Linear("head.message_neighbor", d, c, rng, false);
      object_classifier = ad::Linear("head.object_classifier", d + c, C, rng);
      predicate_hidden = ad::Linear("head.predicate_hidden", 2 * (d + c) + d, hidden, rng);
      predicate_out = ad::Linear("head.predicate_out", hidden, P, rng);
    } else {
      object_classifier = ad::Linear("head.object_classifier", d, C, rng);
      table = FreqTable(classes, predicates, cfg.freq_alpha);
    }
  }

  /// Starts the freq head's object classifier from the detector's classifier.
  void init_from_detector(const perception::DetectorParams& det) {
    if (kind != HeadKind::kFreq) return;
    if (det.weights.rows() != object_classifier.weight.value.rows() ||
        det.weights.cols() != object_classifier.weight.value.cols())
      throw Error("sgg", "detector classifier shape does not match the head");
    object_classifier.weight.value = det.weights;
    object_classifier.bias.value = det.bias;
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    if (kind == HeadKind::kContext) {
      message_self.collect(out);
      message_neighbor.collect(out);
      object_classifier.collect(out);
      predicate_hidden.collect(out);
      predicate_out.collect(out);
    } else {
      object_classifier.collect(out);
    }
    return out;
  }
};

struct HeadGraph {
  Var object_logits;     // n x |C|
  Var predicate_logits;  // m x |P| (context head only; invalid Var for freq)
  bool has_predicate_logits = false;
};

/// Row i of the result is the mean of all other rows of the input (zero when n = 1).
inline Mat neighbor_mean_operator(Eigen::Index n) {
  if (n <= 1) return Mat::Zero(n, n);
  Mat a = Mat::Constant(n, n, 1.0 / static_cast<double>(n - 1));
  a.diagonal().setZero();
  return a;
}

inline HeadGraph head_graph(Tape& tape, HeadParams& p, Var nodes, Var edges,
                            const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  HeadGraph g;
  if (p.kind == HeadKind::kFreq) {
    g.object_logits = p.object_classifier(tape, nodes);
    return g;
  }
  Var neighbors = ad::matmul(tape.constant(neighbor_mean_operator(nodes.rows())), nodes);
  Var context = ad::relu(ad::add(p.message_self(tape, nodes), p.message_neighbor(tape, neighbors)));
  Var hidden = ad::concat_cols(nodes, context);
  g.object_logits = p.object_classifier(tape, hidden);
  if (!pairs.empty()) {
    std::vector<Eigen::Index> subj, obj;
    for (const auto& [i, j] : pairs) {
      subj.push_back(static_cast<Eigen::Index>(i));
      obj.push_back(static_cast<Eigen::Index>(j));
    }
    Var z = ad::concat_cols(ad::concat_cols(ad::gather_rows(hidden, subj), ad::gather_rows(hidden, obj)), edges);
    g.predicate_logits = p.predicate_out(tape, ad::relu(p.predicate_hidden(tape, z)));
    g.has_predicate_logits = true;
  }
  return g;
}

inline std::vector<double> softmax(const Eigen::RowVectorXd& x) {
  const double mx = x.maxCoeff();
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  double z = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) z += (out[static_cast<std::size_t>(k)] = std::exp(x(k) - mx));
  for (double& v : out) v /= z;
  return out;
}

/// Converts head outputs into a prediction. `forced_labels` (PredCls) replaces the label
/// distributions with one-hot rows before freq-table lookups.
inline core::SceneGraphPrediction to_prediction(const HeadParams& p, const HeadGraph& g,
                                                const std::vector<core::BoundingBox>& boxes,
                                                const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                                const std::vector<std::size_t>* forced_labels = nullptr) {
  core::SceneGraphPrediction pred;
  const std::size_t n = boxes.size();
  pred.boxes = boxes;
  const Mat& ol = g.object_logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (forced_labels) {
      std::vector<double> onehot(p.num_classes, 0.0);
      onehot.at(forced_labels->at(i)) = 1.0;
      pred.object_label_dist.push_back(std::move(onehot));
    } else {
      pred.object_label_dist.push_back(softmax(ol.row(static_cast<Eigen::Index>(i))));
    }
  }
  std::vector<double> background(p.num_predicates, 0.0);
  background[0] = 1.0;
  pred.predicate_dist.assign(n * n, background);
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    const auto [i, j] = pairs[e];
    if (p.kind == HeadKind::kFreq) {
      pred.predicate_dist[i * n + j] =
          p.table.row(core::argmax(pred.object_label_dist[i]), core::argmax(pred.object_label_dist[j]));
    } else {
      pred.predicate_dist[i * n + j] = softmax(g.predicate_logits.value().row(static_cast<Eigen::Index>(e)));
    }
  }
  return pred;
}

inline core::SceneGraphPrediction predict_graph(const perception::PreliminaryObjectSet& objects, HeadParams& params,
                                                const std::vector<std::size_t>* forced_labels = nullptr) {
  Tape tape;
  HeadGraph g = head_graph(tape, params, tape.constant(objects.node_features), tape.constant(objects.edge_features),
                           objects.pairs);
  return to_prediction(params, g, objects.boxes, objects.pairs, forced_labels);
}

struct RankedTriple {
  std::size_t subject = 0;
  std::size_t predicate = 0;
  std::size_t object = 0;
  double score = 0.0;
};

/// Graph-constrained ranking: one triple per ordered pair using its best non-background
/// predicate, scored by P(label_i) P(label_j) P(p | i, j); ties by (i, j, p).
inline std::vector<RankedTriple> ranked_triples(const core::SceneGraphPrediction& pred) {
  const std::size_t n = pred.size();
  std::vector<RankedTriple> out;
  std::vector<double> label_conf(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& d = pred.object_label_dist[i];
    label_conf[i] = d[core::argmax(d)];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& dist = pred.pair(i, j);
      std::size_t best = 1;
      for (std::size_t k = 2; k < dist.size(); ++k)
        if (dist[k] > dist[best]) best = k;
      out.push_back({i, best, j, label_conf[i] * label_conf[j] * dist[best]});
    }
  std::stable_sort(out.begin(), out.end(), [](const RankedTriple& a, const RankedTriple& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.subject, a.object, a.predicate) < std::tie(b.subject, b.object, b.predicate);
  });
  return out;
}

}  // namespace sidial::sgg
