#pragma once

// Object detection on corrupted input and construction of the preliminary object set.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/core.hpp"
#include "sidial/json_io.hpp"
#include "sidial/missingness.hpp"

namespace sidial::perception {

using ad::Mat;

/// O' = {V', E'} plus boxes and detector label logits.
struct PreliminaryObjectSet {
  std::vector<core::BoundingBox> boxes;
  Mat node_features;   // n x d
  Mat edge_features;   // n(n-1) x d, ordered pairs in row-major order skipping the diagonal
  Mat label_logits;    // n x |C|
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  std::size_t size() const { return boxes.size(); }
  Eigen::Index feature_width() const { return node_features.cols(); }

  void validate() const {
    if (boxes.empty()) throw Error("objects", "preliminary object set is empty");
    if (node_features.rows() != static_cast<Eigen::Index>(boxes.size()) ||
        edge_features.rows() != static_cast<Eigen::Index>(pairs.size()) ||
        label_logits.rows() != static_cast<Eigen::Index>(boxes.size()))
      throw Error("objects", "row counts disagree with box count");
    if (pairs.size() != boxes.size() * (boxes.size() - 1)) throw Error("objects", "edge count is not n(n-1)");
    if (edge_features.size() != 0 && edge_features.cols() != node_features.cols())
      throw Error("objects", "edge and node feature widths differ");
    if (!node_features.allFinite() || !edge_features.allFinite() || !label_logits.allFinite())
      throw Error("objects", "non-finite features");
  }
};

inline std::vector<std::pair<std::size_t, std::size_t>> ordered_pairs(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> p;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) p.emplace_back(i, j);
  return p;
}

/// Half-open cell index range [lo, hi) of cells whose centers lie in [a, b) along an axis of n cells.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> cell_span(double a, double b, std::size_t n) {
  const double N = static_cast<double>(n);
  auto lo = static_cast<std::ptrdiff_t>(std::ceil(a * N - 0.5));
  auto hi = static_cast<std::ptrdiff_t>(std::ceil(b * N - 0.5));
  lo = std::clamp<std::ptrdiff_t>(lo, 0, static_cast<std::ptrdiff_t>(n));
  hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(n));
  return {lo, hi};
}

/// Summed-area table over a feature grid for O(D) region means.
class IntegralGrid {
 public:
  explicit IntegralGrid(const core::FeatureGrid& g)
      : h_(g.height()), w_(g.width()), d_(g.depth()), sums_((h_ + 1) * (w_ + 1) * d_, 0.0), grid_(&g) {
    for (std::size_t r = 0; r < h_; ++r)
      for (std::size_t c = 0; c < w_; ++c)
        for (std::size_t k = 0; k < d_; ++k)
          ref(r + 1, c + 1, k) = g.at(r, c, k) + get(r, c + 1, k) + get(r + 1, c, k) - get(r, c, k);
  }

  /// Channel means over cells whose centers fall in `box`, or the single nearest cell if none do.
  std::vector<double> mean(const core::BoundingBox& box) const {
    auto [r0, r1] = cell_span(box.y, box.bottom(), h_);
    auto [c0, c1] = cell_span(box.x, box.right(), w_);
    std::vector<double> out(d_);
    if (r1 <= r0 || c1 <= c0) {
      const auto r = std::min(h_ - 1, static_cast<std::size_t>(std::max(0.0, std::floor(box.cy() * h_))));
      const auto c = std::min(w_ - 1, static_cast<std::size_t>(std::max(0.0, std::floor(box.cx() * w_))));
      for (std::size_t k = 0; k < d_; ++k) out[k] = grid_->at(r, c, k);
      return out;
    }
    const double count = static_cast<double>((r1 - r0) * (c1 - c0));
    const auto R0 = static_cast<std::size_t>(r0), R1 = static_cast<std::size_t>(r1);
    const auto C0 = static_cast<std::size_t>(c0), C1 = static_cast<std::size_t>(c1);
    for (std::size_t k = 0; k < d_; ++k)
      out[k] = (get(R1, C1, k) - get(R0, C1, k) - get(R1, C0, k) + get(R0, C0, k)) / count;
    return out;
  }

 private:
  double& ref(std::size_t r, std::size_t c, std::size_t k) { return sums_[(r * (w_ + 1) + c) * d_ + k]; }
  double get(std::size_t r, std::size_t c, std::size_t k) const { return sums_[(r * (w_ + 1) + c) * d_ + k]; }

  std::size_t h_, w_, d_;
  std::vector<double> sums_;
  const core::FeatureGrid* grid_;
};

/// Mean-pooled channels of `box` followed by its geometry (x, y, w, h); width D + 4.
inline std::vector<double> pool_region(const core::FeatureGrid& grid, const core::BoundingBox& box) {
  std::vector<double> v = IntegralGrid(grid).mean(box);
  v.insert(v.end(), {box.x, box.y, box.w, box.h});
  return v;
}

inline Eigen::Index feature_width(const core::FeatureGrid& g) { return static_cast<Eigen::Index>(g.depth()) + 4; }

struct DetectorConfig {
  std::size_t epochs = 300;
  double learning_rate = 0.5;
  double threshold = 0.5;
  std::size_t max_detections = 8;
  std::uint64_t seed = 1;
};

struct DetectorParams {
  Mat weights;  // d x |C|
  Mat bias;     // 1 x |C|
  double threshold = 0.5;
  std::size_t max_detections = 8;
  bool trained = false;

  std::size_t num_classes() const { return static_cast<std::size_t>(weights.cols()); }

  void validate(std::size_t num_classes, Eigen::Index d) const {
    if (weights.rows() != d || weights.cols() != static_cast<Eigen::Index>(num_classes) || bias.cols() != weights.cols())
      throw Error("detector", "classifier shape does not match the vocabulary / feature width");
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("detector", "threshold must be in (0, 1)");
  }

  Mat logits(const Mat& features) const { return (features * weights).rowwise() + bias.row(0); }
};

inline Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Mat gt_box_features(const missingness::CorruptedScene& s) {
  IntegralGrid ig(s.corrupted_grid);
  Mat f(static_cast<Eigen::Index>(s.base.objects.size()), feature_width(s.corrupted_grid));
  for (std::size_t i = 0; i < s.base.objects.size(); ++i) {
    const auto& b = s.base.objects[i].box;
    auto m = ig.mean(b);
    m.insert(m.end(), {b.x, b.y, b.w, b.h});
    f.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  }
  return f;
}

/// Softmax-regression classifier fit by full-batch gradient descent on GT-box features.
inline DetectorParams train_detector(const std::vector<missingness::CorruptedScene>& dataset, std::size_t num_classes,
                                     const DetectorConfig& cfg) {
  if (dataset.empty()) throw Error("detector", "cannot train a detector on an empty dataset");
  std::vector<Mat> blocks;
  std::vector<std::size_t> labels;
  Eigen::Index rows = 0;
  for (const auto& s : dataset) {
    blocks.push_back(gt_box_features(s));
    rows += blocks.back().rows();
    for (const auto& o : s.base.objects) labels.push_back(o.class_index);
  }
  const Eigen::Index d = blocks.front().cols();
  Mat X(rows, d);
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    X.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  Mat Y = Mat::Zero(rows, static_cast<Eigen::Index>(num_classes));
  for (Eigen::Index i = 0; i < rows; ++i) Y(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)])) = 1.0;

  std::mt19937_64 rng(cfg.seed);
  DetectorParams p;
  p.weights = ad::random_matrix(d, static_cast<Eigen::Index>(num_classes), 0.01, rng);
  p.bias = Mat::Zero(1, static_cast<Eigen::Index>(num_classes));
  p.threshold = cfg.threshold;
  p.max_detections = cfg.max_detections;
  const double n = static_cast<double>(rows);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const Mat G = (softmax_rows(p.logits(X)) - Y) / n;
    p.weights -= cfg.learning_rate * (X.transpose() * G);
    p.bias -= cfg.learning_rate * G.colwise().sum();
  }
  p.trained = true;
  return p;
}

/// Fraction of GT objects whose argmax detector label is correct.
inline double label_accuracy(const std::vector<missingness::CorruptedScene>& dataset, const DetectorParams& p) {
  std::size_t hits = 0, total = 0;
  for (const auto& s : dataset) {
    const Mat logits = p.logits(gt_box_features(s));
    for (std::size_t i = 0; i < s.base.objects.size(); ++i) {
      Eigen::Index best;
      logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      hits += static_cast<std::size_t>(best) == s.base.objects[i].class_index;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

enum class BoxMode { kGroundTruth, kPredicted };

/// Anchor shapes: every combination of three side lengths, slid with a stride of 1/32.
inline std::vector<core::BoundingBox> anchor_grid() {
  static const std::vector<double> kSides{0.12, 0.18, 0.26};
  constexpr double kStride = 1.0 / 32.0;
  std::vector<core::BoundingBox> out;
  for (double w : kSides)
    for (double h : kSides)
      for (double y = 0.0; y + h <= 1.0 + core::kCoordEps; y += kStride)
        for (double x = 0.0; x + w <= 1.0 + core::kCoordEps; x += kStride)
          out.push_back({x, y, std::min(w, 1.0 - x), std::min(h, 1.0 - y)});
  return out;
}

/// Per-cell class map: cells the classifier assigns to a class with confidence at or above
/// the threshold, grouped into 4-connected components per class.
struct CellComponents {
  std::vector<int> label;                    // component id per cell, -1 for unassigned
  std::vector<std::size_t> klass;            // class per component
  std::vector<std::array<std::size_t, 4>> extent;  // r0, c0, r1, c1 inclusive
};

inline CellComponents cell_components(const core::FeatureGrid& grid, const DetectorParams& p) {
  const std::size_t H = grid.height(), W = grid.width(), D = grid.depth();
  Mat feats(static_cast<Eigen::Index>(H * W), feature_width(grid));
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const auto row = static_cast<Eigen::Index>(r * W + c);
      for (std::size_t k = 0; k < D; ++k) feats(row, static_cast<Eigen::Index>(k)) = grid.at(r, c, k);
      feats.row(row).tail(4) << static_cast<double>(c) / W, static_cast<double>(r) / H, 1.0 / W, 1.0 / H;
    }
  const Mat probs = softmax_rows(p.logits(feats));
  std::vector<int> cls(H * W, -1);
  for (std::size_t i = 0; i < H * W; ++i) {
    Eigen::Index best;
    if (probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&best) >= p.threshold) cls[i] = static_cast<int>(best);
  }
  CellComponents out;
  out.label.assign(H * W, -1);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (cls[start] < 0 || out.label[start] >= 0) continue;
    const int id = static_cast<int>(out.klass.size());
    out.klass.push_back(static_cast<std::size_t>(cls[start]));
    std::array<std::size_t, 4> ext{start / W, start % W, start / W, start % W};
    out.label[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t r = i / W, c = i % W;
      ext = {std::min(ext[0], r), std::min(ext[1], c), std::max(ext[2], r), std::max(ext[3], c)};
      auto visit = [&](std::size_t j) {
        if (cls[j] == cls[start] && out.label[j] < 0) {
          out.label[j] = id;
          stack.push_back(j);
        }
      };
      if (r > 0) visit(i - W);
      if (r + 1 < H) visit(i + W);
      if (c > 0) visit(i - 1);
      if (c + 1 < W) visit(i + 1);
    }
    out.extent.push_back(ext);
  }
  return out;
}

/// Snaps an anchor to the cell extent of the same-class components it covers; the anchor is
/// returned unchanged when it covers none.
inline core::BoundingBox refine_box(const core::BoundingBox& anchor, std::size_t klass, const CellComponents& cc,
                                    std::size_t H, std::size_t W) {
  const auto [r0, r1] = cell_span(anchor.y, anchor.bottom(), H);
  const auto [c0, c1] = cell_span(anchor.x, anchor.right(), W);
  std::size_t er0 = H, ec0 = W, er1 = 0, ec1 = 0;
  bool any = false;
  for (auto r = r0; r < r1; ++r)
    for (auto c = c0; c < c1; ++c) {
      const int id = cc.label[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c)];
      if (id < 0 || cc.klass[static_cast<std::size_t>(id)] != klass) continue;
      const auto& e = cc.extent[static_cast<std::size_t>(id)];
      er0 = std::min(er0, e[0]);
      ec0 = std::min(ec0, e[1]);
      er1 = std::max(er1, e[2]);
      ec1 = std::max(ec1, e[3]);
      any = true;
    }
  if (!any) return anchor;
  const double h = static_cast<double>(H), w = static_cast<double>(W);
  return {ec0 / w, er0 / h, static_cast<double>(ec1 + 1 - ec0) / w, static_cast<double>(er1 + 1 - er0) / h};
}

/// Predicted boxes: anchors scored by max class confidence (ties, after rounding to 1e-3,
/// go to the larger anchor), snapped to the cell extent of their class, and greedily kept
/// unless they overlap a kept box at IoU > 0.5 or contain / are contained by one, then cut
/// at the threshold.
inline std::vector<core::BoundingBox> propose_boxes(const core::FeatureGrid& grid, const DetectorParams& p) {
  const auto anchors = anchor_grid();
  IntegralGrid ig(grid);
  Mat feats(static_cast<Eigen::Index>(anchors.size()), feature_width(grid));
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    auto m = ig.mean(anchors[a]);
    m.insert(m.end(), {anchors[a].x, anchors[a].y, anchors[a].w, anchors[a].h});
    feats.row(static_cast<Eigen::Index>(a)) = Eigen::Map<const Eigen::RowVectorXd>(m.data(), feats.cols());
  }
  const Mat probs = softmax_rows(p.logits(feats));
  std::vector<double> score(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a)
    score[a] = std::round(probs.row(static_cast<Eigen::Index>(a)).maxCoeff() * 1000.0) / 1000.0;
  std::vector<std::size_t> order(anchors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return anchors[a].area() > anchors[b].area();
  });
  const CellComponents cc = cell_components(grid, p);
  std::vector<core::BoundingBox> kept;
  for (std::size_t a : order) {
    if (score[a] < p.threshold || kept.size() >= p.max_detections) break;
    Eigen::Index klass;
    probs.row(static_cast<Eigen::Index>(a)).maxCoeff(&klass);
    const auto box = refine_box(anchors[a], static_cast<std::size_t>(klass), cc, grid.height(), grid.width());
    bool suppressed = false;
    for (const auto& k : kept) suppressed = suppressed || core::iou(k, box) > 0.5 || k.contains(box) || box.contains(k);
    if (!suppressed) kept.push_back(box);
  }
  if (kept.empty()) kept.push_back(anchors[order.front()]);
  return kept;
}

/// Builds O' from a corrupted scene. Edge (i, j) pools the union box and appends the
/// geometry difference subject minus object, so (i, j) and (j, i) share the pooled part and
/// have negated tails.
inline PreliminaryObjectSet detect(const missingness::CorruptedScene& input, const DetectorParams& params, BoxMode mode) {
  if (mode == BoxMode::kPredicted && !params.trained)
    throw Error("detector", "predicted-box detection requires a trained detector");
  PreliminaryObjectSet o;
  if (mode == BoxMode::kGroundTruth) {
    for (const auto& obj : input.base.objects) o.boxes.push_back(obj.box);
  } else {
    o.boxes = propose_boxes(input.corrupted_grid, params);
  }
  const auto n = static_cast<Eigen::Index>(o.boxes.size());
  const Eigen::Index d = feature_width(input.corrupted_grid);
  const Eigen::Index D = d - 4;
  IntegralGrid ig(input.corrupted_grid);
  o.node_features.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = o.boxes[static_cast<std::size_t>(i)];
    const auto m = ig.mean(b);
    for (Eigen::Index k = 0; k < D; ++k) o.node_features(i, k) = m[static_cast<std::size_t>(k)];
    o.node_features.row(i).tail(4) << b.x, b.y, b.w, b.h;
  }
  o.pairs = ordered_pairs(o.boxes.size());
  o.edge_features.resize(static_cast<Eigen::Index>(o.pairs.size()), d);
  for (std::size_t e = 0; e < o.pairs.size(); ++e) {
    const auto& [i, j] = o.pairs[e];
    const auto& a = o.boxes[i];
    const auto& b = o.boxes[j];
    const auto m = ig.mean(core::union_box(a, b));
    const auto row = static_cast<Eigen::Index>(e);
    for (Eigen::Index k = 0; k < D; ++k) o.edge_features(row, k) = m[static_cast<std::size_t>(k)];
    o.edge_features.row(row).tail(4) << a.x - b.x, a.y - b.y, a.w - b.w, a.h - b.h;
  }
  o.label_logits = params.weights.size() ? params.logits(o.node_features)
                                         : Mat::Zero(n, 1);
  return o;
}

inline io::json to_json(const DetectorParams& p) {
  auto mat = [](const Mat& m) {
    io::json rows = io::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      io::json row = io::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  return io::json{{"weights", mat(p.weights)},     {"bias", mat(p.bias)},
                  {"threshold", p.threshold},      {"max_detections", p.max_detections},
                  {"trained", p.trained}};
}

inline DetectorParams detector_from_json(const io::json& j) {
  auto mat = [](const io::json& rows) {
    if (!rows.is_array() || rows.empty()) throw Error("parse", "matrix must be a non-empty nested array");
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != static_cast<std::size_t>(m.cols())) throw Error("parse", "ragged matrix");
      for (std::size_t k = 0; k < rows[i].size(); ++k)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k].get<double>();
    }
    return m;
  };
  DetectorParams p;
  p.weights = mat(j.at("weights"));
  p.bias = mat(j.at("bias"));
  p.threshold = j.at("threshold").get<double>();
  p.max_detections = j.value("max_detections", p.max_detections);
  p.trained = j.at("trained").get<bool>();
  return p;
}

}  // namespace sidial::perception
