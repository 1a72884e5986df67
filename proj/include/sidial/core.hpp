#pragma once

// Shared domain types: boxes, vocabularies, scenes and scene-graph predictions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sidial/error.hpp"

namespace sidial::core {

/// Slack used when validating normalized coordinates produced by float arithmetic.
inline constexpr double kCoordEps = 1e-9;

/// Axis-aligned box in normalized image coordinates, (x, y) is the top-left corner.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
           x >= -kCoordEps && y >= -kCoordEps && w > 0.0 && h > 0.0 &&
           x + w <= 1.0 + kCoordEps && y + h <= 1.0 + kCoordEps;
  }

  bool contains_point(double px, double py) const {
    return px >= x && px < x + w && py >= y && py < y + h;
  }

  bool contains(const BoundingBox& o) const {
    return o.x >= x && o.y >= y && o.right() <= right() && o.bottom() <= bottom();
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline BoundingBox make_box(double x, double y, double w, double h) {
  BoundingBox b{x, y, w, h};
  if (!b.valid()) {
    throw Error("invalid_box", "box (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                   std::to_string(w) + "," + std::to_string(h) +
                                   ") violates normalized-box invariants");
  }
  return b;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (a == b) return 1.0;
  const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Smallest box containing both inputs.
inline BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
  if (a.contains(b)) return a;
  if (b.contains(a)) return b;
  const double x0 = std::min(a.x, b.x);
  const double y0 = std::min(a.y, b.y);
  const double x1 = std::max(a.right(), b.right());
  const double y1 = std::max(a.bottom(), b.bottom());
  // widen by ulps where x0 + (x1 - x0) rounds below x1, so containment holds exactly
  double w = x1 - x0, h = y1 - y0;
  while (x0 + w < x1) w = std::nextafter(w, 2.0);
  while (y0 + h < y1) h = std::nextafter(h, 2.0);
  return BoundingBox{x0, y0, w, h};
}

/// Object and predicate names. Predicate index 0 is the background ("no relation") class.
struct Vocabulary {
  std::vector<std::string> object_classes;
  std::vector<std::string> predicate_classes;

  static constexpr const char* kBackground = "__background__";

  std::size_t num_objects() const { return object_classes.size(); }
  std::size_t num_predicates() const { return predicate_classes.size(); }

  void validate() const {
    if (object_classes.size() < 2) throw Error("vocab", "vocabulary needs at least 2 object classes");
    if (predicate_classes.size() < 2)
      throw Error("vocab", "vocabulary needs at least 2 predicate classes (incl. background)");
    if (predicate_classes.front() != kBackground)
      throw Error("vocab", "predicate index 0 must be the background predicate");
    auto check_unique = [](const std::vector<std::string>& names, const char* what) {
      std::set<std::string> seen(names.begin(), names.end());
      if (seen.size() != names.size()) throw Error("vocab", std::string("duplicate ") + what + " names");
    };
    check_unique(object_classes, "object class");
    check_unique(predicate_classes, "predicate");
  }

  std::optional<std::size_t> object_index(const std::string& name) const {
    auto it = std::find(object_classes.begin(), object_classes.end(), name);
    if (it == object_classes.end()) return std::nullopt;
    return static_cast<std::size_t>(it - object_classes.begin());
  }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

struct RelationTriple {
  std::size_t subject_index = 0;
  std::size_t predicate_index = 0;
  std::size_t object_index = 0;

  friend auto operator<=>(const RelationTriple&, const RelationTriple&) = default;
};

/// H x W x D array of reals stored row-major as [row][col][channel].
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(std::size_t h, std::size_t w, std::size_t d, double fill = 0.0)
      : h_(h), w_(w), d_(d), data_(h * w * d, fill) {}

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t depth() const { return d_; }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t r, std::size_t c, std::size_t k) { return data_[(r * w_ + c) * d_ + k]; }
  double at(std::size_t r, std::size_t c, std::size_t k) const { return data_[(r * w_ + c) * d_ + k]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  /// Normalized center of cell (r, c).
  double cell_cx(std::size_t c) const { return (static_cast<double>(c) + 0.5) / static_cast<double>(w_); }
  double cell_cy(std::size_t r) const { return (static_cast<double>(r) + 0.5) / static_cast<double>(h_); }

  bool cell_in_box(std::size_t r, std::size_t c, const BoundingBox& b) const {
    return b.contains_point(cell_cx(c), cell_cy(r));
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  std::size_t h_ = 0, w_ = 0, d_ = 0;
  std::vector<double> data_;
};

/// One question candidate and its stored answer.
struct QACandidate {
  std::string question_text;
  std::string answer_text;
  bool is_ground_truth = false;
  std::optional<std::size_t> target_object_index;

  friend bool operator==(const QACandidate&, const QACandidate&) = default;
};

struct SceneObject {
  BoundingBox box;
  std::size_t class_index = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneInstance {
  std::string scene_id;
  FeatureGrid feature_grid;
  std::vector<SceneObject> objects;
  std::vector<RelationTriple> relations;
  std::vector<QACandidate> qa_candidates;

  /// Throws Error("scene", ...) naming the violated invariant.
  void validate(const Vocabulary& vocab, std::size_t max_objects = 0,
                std::optional<std::size_t> n_cand = std::nullopt) const {
    auto fail = [&](const std::string& msg) { throw Error("scene", scene_id + ": " + msg); };
    if (feature_grid.height() < 1 || feature_grid.width() < 1 || feature_grid.depth() < 1)
      fail("feature grid dimensions must be >= 1");
    if (objects.empty()) fail("scene has no objects");
    if (max_objects > 0 && objects.size() > max_objects) fail("too many objects");
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (!objects[i].box.valid()) fail("object " + std::to_string(i) + " has an invalid box");
      if (objects[i].class_index >= vocab.num_objects())
        fail("object " + std::to_string(i) + " class index out of range");
    }
    for (const auto& r : relations) {
      if (r.subject_index >= objects.size() || r.object_index >= objects.size())
        fail("relation object index out of range");
      if (r.subject_index == r.object_index) fail("relation subject equals object");
      if (r.predicate_index == 0 || r.predicate_index >= vocab.num_predicates())
        fail("relation predicate index out of range or background");
    }
    for (const auto& q : qa_candidates) {
      if (q.question_text.empty()) fail("empty question text");
      if (q.is_ground_truth != q.target_object_index.has_value())
        fail("ground-truth flag and target index disagree");
      if (q.is_ground_truth) {
        if (*q.target_object_index >= objects.size()) fail("QA target index out of range");
        if (q.answer_text != vocab.object_classes[objects[*q.target_object_index].class_index])
          fail("ground-truth answer does not name the target's class");
      }
    }
    if (n_cand && qa_candidates.size() != *n_cand)
      fail("expected " + std::to_string(*n_cand) + " QA candidates, got " +
           std::to_string(qa_candidates.size()));
  }

  friend bool operator==(const SceneInstance&, const SceneInstance&) = default;
};

/// Output graph: per-object label distributions and per-ordered-pair predicate distributions.
struct SceneGraphPrediction {
  std::vector<BoundingBox> boxes;
  std::vector<std::vector<double>> object_label_dist;  // n x |C|
  std::vector<std::vector<double>> predicate_dist;     // (n*n) x |P|, row i*n+j

  std::size_t size() const { return boxes.size(); }
  const std::vector<double>& pair(std::size_t i, std::size_t j) const { return predicate_dist[i * size() + j]; }

  void validate(double tol = 1e-6) const {
    const std::size_t n = boxes.size();
    if (object_label_dist.size() != n) throw Error("prediction", "label distribution count mismatch");
    if (predicate_dist.size() != n * n) throw Error("prediction", "predicate distribution count mismatch");
    auto check_row = [&](const std::vector<double>& row) {
      double s = 0.0;
      for (double v : row) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw Error("prediction", "distribution entry negative or non-finite");
        s += v;
      }
      if (std::abs(s - 1.0) > tol) throw Error("prediction", "distribution row does not sum to 1");
    };
    for (const auto& row : object_label_dist) check_row(row);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) check_row(pair(i, j));
  }
};

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace sidial::core
