#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <tuple>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/core.hpp"
#include "sidial/metrics.hpp"

namespace oracle {

using sidial::ad::Mat;
using sidial::ad::Parameter;

// ---------------------------------------------------------------------------
// Mean recall by exhaustive hit counting. Instead of sorting, the rank of every
// candidate triple is the number of candidates that precede it.

struct Candidate {
  std::size_t i, j, p;
  double score;
};

inline bool precedes(const Candidate& a, const Candidate& b) {
  if (a.score > b.score) return true;
  if (a.score < b.score) return false;
  return std::tie(a.i, a.j, a.p) < std::tie(b.i, b.j, b.p);
}

inline std::vector<Candidate> candidates(const sidial::core::SceneGraphPrediction& pred) {
  const std::size_t n = pred.boxes.size();
  std::vector<double> conf(n);
  for (std::size_t i = 0; i < n; ++i) conf[i] = *std::max_element(pred.object_label_dist[i].begin(), pred.object_label_dist[i].end());
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& d = pred.predicate_dist[i * n + j];
      std::size_t best = 1;
      for (std::size_t p = 1; p < d.size(); ++p)
        if (d[p] > d[best]) best = p;
      out.push_back({i, j, best, conf[i] * conf[j] * d[best]});
    }
  return out;
}

inline std::size_t label_of(const std::vector<double>& dist) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < dist.size(); ++k)
    if (dist[k] > dist[best]) best = k;
  return best;
}

inline bool node_hit(const sidial::core::SceneGraphPrediction& pred, std::size_t i,
                     const sidial::metrics::GroundTruth& gt, std::size_t s, sidial::metrics::Protocol protocol) {
  using sidial::metrics::Protocol;
  if (protocol == Protocol::kPredCls) return i == s;
  if (protocol == Protocol::kSgCls) return i == s && label_of(pred.object_label_dist[i]) == gt.labels[s];
  const auto& a = pred.boxes[i];
  const auto& b = gt.boxes[s];
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double iou = (a == b) ? 1.0 : inter / (a.w * a.h + b.w * b.h - inter);
  return iou >= 0.5 && label_of(pred.object_label_dist[i]) == gt.labels[s];
}

struct Scene {
  sidial::core::SceneGraphPrediction prediction;
  sidial::metrics::GroundTruth truth;
};

inline double mean_recall(const std::vector<Scene>& scenes, sidial::metrics::Protocol protocol, std::size_t k,
                          std::size_t num_predicates) {
  std::vector<std::size_t> hits(num_predicates, 0), totals(num_predicates, 0);
  for (const auto& sc : scenes) {
    if (sc.truth.relations.empty()) continue;
    const auto cands = candidates(sc.prediction);
    for (const auto& r : sc.truth.relations) {
      ++totals[r.predicate_index];
      bool hit = false;
      for (const auto& c : cands) {
        std::size_t rank = 0;
        for (const auto& other : cands) rank += precedes(other, c);
        if (rank < k && c.p == r.predicate_index && node_hit(sc.prediction, c.i, sc.truth, r.subject_index, protocol) &&
            node_hit(sc.prediction, c.j, sc.truth, r.object_index, protocol))
          hit = true;
      }
      hits[r.predicate_index] += hit;
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t p = 1; p < num_predicates; ++p)
    if (totals[p] > 0) {
      sum += static_cast<double>(hits[p]) / static_cast<double>(totals[p]);
      ++present;
    }
  return present ? sum / static_cast<double>(present) : 0.0;
}

/// Random tiny corpus: up to `max_objects` objects, `num_predicates` classes including background.
/// Probabilities are quantized so that score ties occur.
inline std::vector<Scene> random_corpus(std::mt19937_64& rng, sidial::metrics::Protocol protocol, std::size_t max_objects,
                                        std::size_t num_predicates, std::size_t num_classes, std::size_t max_scenes) {
  std::uniform_int_distribution<std::size_t> scenes_d(1, max_scenes), objs_d(1, max_objects);
  std::uniform_int_distribution<int> q(1, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto dist = [&](std::size_t width) {
    std::vector<double> v(width);
    double s = 0.0;
    for (auto& x : v) s += (x = q(rng));
    for (auto& x : v) x /= s;
    return v;
  };
  std::vector<Scene> out;
  const std::size_t ns = scenes_d(rng);
  for (std::size_t s = 0; s < ns; ++s) {
    Scene sc;
    const std::size_t n = objs_d(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const double w = 0.1 + 0.3 * u(rng), h = 0.1 + 0.3 * u(rng);
      sc.truth.boxes.push_back({u(rng) * (1 - w), u(rng) * (1 - h), w, h});
      sc.truth.labels.push_back(std::uniform_int_distribution<std::size_t>(0, num_classes - 1)(rng));
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 1; p < num_predicates; ++p)
          if (i != j && u(rng) < 0.3) sc.truth.relations.push_back({i, p, j});
    // predicted node set: GT boxes for predcls/sgcls; jittered / shuffled / extra boxes for sgdet
    if (protocol == sidial::metrics::Protocol::kSgDet) {
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i : order) {
        auto b = sc.truth.boxes[i];
        if (u(rng) < 0.5) {
          b.x = std::min(1.0 - b.w, b.x + 0.1 * u(rng));
          b.y = std::min(1.0 - b.h, b.y + 0.1 * u(rng));
        }
        sc.prediction.boxes.push_back(b);
      }
      if (u(rng) < 0.5) sc.prediction.boxes.push_back({0.0, 0.0, 0.2, 0.2});
    } else {
      sc.prediction.boxes = sc.truth.boxes;
    }
    const std::size_t m = sc.prediction.boxes.size();
    for (std::size_t i = 0; i < m; ++i) {
      if (protocol == sidial::metrics::Protocol::kPredCls) {
        std::vector<double> onehot(num_classes, 0.0);
        onehot[sc.truth.labels[i]] = 1.0;
        sc.prediction.object_label_dist.push_back(onehot);
      } else {
        sc.prediction.object_label_dist.push_back(dist(num_classes));
      }
    }
    for (std::size_t e = 0; e < m * m; ++e) sc.prediction.predicate_dist.push_back(dist(num_predicates));
    out.push_back(std::move(sc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Central finite differences over parameters.

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// `loss` evaluates the scalar loss with current parameter values; `analytic` holds the tape
/// gradient for every parameter (same order). Entries where both gradients are below `floor`
/// in magnitude are compared absolutely against `floor` instead.
inline GradCheck check_gradients(const std::vector<Parameter*>& params, const std::vector<Mat>& analytic,
                                 const std::function<double()>& loss, double h = 1e-5, double floor = 1e-5) {
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat& v = params[k]->value;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const double saved = v(i, j);
        v(i, j) = saved + h;
        const double up = loss();
        v(i, j) = saved - h;
        const double down = loss();
        v(i, j) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double a = analytic[k](i, j);
        const double scale = std::max({std::abs(a), std::abs(numeric), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / scale);
        ++out.checked;
      }
  }
  return out;
}

// Runs `build` on a fresh tape, back-propagates, and compares against central differences.
inline GradCheck check_graph(const std::vector<Parameter*>& params,
                             const std::function<sidial::ad::Var(sidial::ad::Tape&)>& build, double h = 1e-5,
                             double floor = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  {
    sidial::ad::Tape tape;
    tape.backward(build(tape));
  }
  std::vector<Mat> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  for (Parameter* p : params) p->zero_grad();
  return check_gradients(
      params, analytic,
      [&] {
        sidial::ad::Tape tape;
        return build(tape).scalar();
      },
      h, floor);
}

}  // namespace oracle
