#pragma once

// Synthetic scene generation, QA candidate pools and the JSONL subset loader.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sidial/core.hpp"
#include "sidial/json_io.hpp"

namespace sidial::datagen {

using core::QACandidate;
using core::SceneInstance;
using io::json;

struct GenConfig {
  std::size_t grid_h = 16;
  std::size_t grid_w = 16;
  std::size_t grid_d = 8;
  std::size_t num_classes = 6;
  std::size_t num_predicates = 4;  // excluding background; at most 4 geometric rules exist
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  std::size_t n_cand = 100;
  std::size_t scenes = 500;
  std::uint64_t seed = 7;
  std::size_t region_grid = 3;        // questions address cells of a region_grid x region_grid partition
  double gt_question_rate = 1.0;      // probability that an object carries a ground-truth QA pair
  double min_box_size = 0.12;
  double max_box_size = 0.30;
  double noise_stddev = 0.05;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("config", "GenConfig: " + m); };
    if (grid_h == 0 || grid_w == 0 || grid_d == 0) fail("grid dimensions must be positive");
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (grid_d < num_classes) fail("grid_d must be >= num_classes (one signature channel per class)");
    if (num_predicates < 1 || num_predicates > 4) fail("num_predicates must be in [1, 4]");
    if (min_objects < 1 || max_objects < min_objects) fail("object count range invalid");
    if (region_grid < 1) fail("region_grid must be positive");
    if (max_objects > region_grid * region_grid) fail("max_objects exceeds the number of question regions");
    if (n_cand < max_objects) fail("n_cand must cover every ground-truth candidate of a scene");
    if (!(gt_question_rate >= 0.0 && gt_question_rate <= 1.0)) fail("gt_question_rate must be in [0, 1]");
    if (!(min_box_size > 0.0 && max_box_size >= min_box_size && max_box_size < 1.0)) fail("box size range invalid");
    if (!(noise_stddev >= 0.0)) fail("noise_stddev must be nonnegative");
  }
};

inline json to_json(const GenConfig& c) {
  return json{{"grid_h", c.grid_h},           {"grid_w", c.grid_w},
              {"grid_d", c.grid_d},           {"num_classes", c.num_classes},
              {"num_predicates", c.num_predicates}, {"min_objects", c.min_objects},
              {"max_objects", c.max_objects}, {"n_cand", c.n_cand},
              {"scenes", c.scenes},           {"seed", c.seed},
              {"region_grid", c.region_grid}, {"gt_question_rate", c.gt_question_rate},
              {"min_box_size", c.min_box_size}, {"max_box_size", c.max_box_size},
              {"noise_stddev", c.noise_stddev}};
}

inline GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  c.grid_h = j.value("grid_h", c.grid_h);
  c.grid_w = j.value("grid_w", c.grid_w);
  c.grid_d = j.value("grid_d", c.grid_d);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.num_predicates = j.value("num_predicates", c.num_predicates);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.n_cand = j.value("n_cand", c.n_cand);
  c.scenes = j.value("scenes", c.scenes);
  c.seed = j.value("seed", c.seed);
  c.region_grid = j.value("region_grid", c.region_grid);
  c.gt_question_rate = j.value("gt_question_rate", c.gt_question_rate);
  c.min_box_size = j.value("min_box_size", c.min_box_size);
  c.max_box_size = j.value("max_box_size", c.max_box_size);
  c.noise_stddev = j.value("noise_stddev", c.noise_stddev);
  c.validate();
  return c;
}

// Geometric relation rules. Margins are fixed.
inline constexpr double kDirectionalMargin = 0.15;
inline constexpr double kNearDistance = 0.25;

enum Predicate : std::size_t { kLeftOf = 1, kAbove = 2, kOverlaps = 3, kNear = 4 };

inline core::Vocabulary make_vocabulary(const GenConfig& cfg) {
  static const std::vector<std::string> kShapes{"cube", "sphere", "cone", "cylinder", "torus", "pyramid", "prism", "disk"};
  static const std::vector<std::string> kRules{"left_of", "above", "overlaps", "near"};
  core::Vocabulary v;
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    v.object_classes.push_back(c < kShapes.size() ? kShapes[c] : "shape" + std::to_string(c));
  v.predicate_classes.push_back(core::Vocabulary::kBackground);
  for (std::size_t p = 0; p < cfg.num_predicates; ++p) v.predicate_classes.push_back(kRules[p]);
  v.validate();
  return v;
}

/// True iff predicate `p` holds for the ordered pair (a, b).
inline bool relation_holds(std::size_t p, const core::BoundingBox& a, const core::BoundingBox& b) {
  switch (p) {
    case kLeftOf: return a.cx() < b.cx() - kDirectionalMargin;
    case kAbove: return a.cy() < b.cy() - kDirectionalMargin;
    case kOverlaps: return core::iou(a, b) > 0.0;
    case kNear: {
      const double d = std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
      return d < kNearDistance && core::iou(a, b) == 0.0;
    }
    default: return false;
  }
}

inline std::vector<core::RelationTriple> derive_relations(const std::vector<core::SceneObject>& objects,
                                                          std::size_t num_predicates) {
  std::vector<core::RelationTriple> out;
  for (std::size_t a = 0; a < objects.size(); ++a)
    for (std::size_t b = 0; b < objects.size(); ++b) {
      if (a == b) continue;
      for (std::size_t p = 1; p <= num_predicates; ++p)
        if (relation_holds(p, objects[a].box, objects[b].box)) out.push_back({a, p, b});
    }
  return out;
}

/// Index of the question region whose cell holds the box center, row-major.
inline std::size_t region_of(const core::BoundingBox& b, std::size_t region_grid) {
  const auto g = static_cast<double>(region_grid);
  const auto row = std::min(region_grid - 1, static_cast<std::size_t>(std::floor(b.cy() * g)));
  const auto col = std::min(region_grid - 1, static_cast<std::size_t>(std::floor(b.cx() * g)));
  return row * region_grid + col;
}

inline std::string region_question(std::size_t region, std::size_t region_grid) {
  return "what is the object at cell r" + std::to_string(region / region_grid) + " c" +
         std::to_string(region % region_grid);
}

inline const std::vector<std::string>& relational_templates() {
  static const std::vector<std::string> t{"what is near the ", "what is left of the ", "what is above the "};
  return t;
}

inline SceneInstance generate_scene(std::uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  const core::Vocabulary vocab = make_vocabulary(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<std::size_t> class_dist(0, cfg.num_classes - 1);
  std::uniform_real_distribution<double> size_dist(cfg.min_box_size, cfg.max_box_size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SceneInstance s;
  s.scene_id = "scene-" + std::to_string(seed);
  const std::size_t n = count_dist(rng);
  std::set<std::size_t> occupied;
  for (std::size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const double w = size_dist(rng), h = size_dist(rng);
      core::BoundingBox b{unit(rng) * (1.0 - w), unit(rng) * (1.0 - h), w, h};
      const std::size_t region = region_of(b, cfg.region_grid);
      if (occupied.count(region)) continue;
      bool ambiguous = false;
      for (const auto& o : s.objects) ambiguous = ambiguous || o.box.contains(b) || b.contains(o.box);
      if (ambiguous) continue;
      occupied.insert(region);
      s.objects.push_back({b, class_dist(rng)});
      placed = true;
    }
    if (!placed)
      throw Error("generation", "object placement failed after 1000 attempts for seed " + std::to_string(seed));
  }

  core::FeatureGrid grid(cfg.grid_h, cfg.grid_w, cfg.grid_d);
  std::normal_distribution<double> noise(0.0, cfg.noise_stddev);
  for (std::size_t r = 0; r < cfg.grid_h; ++r)
    for (std::size_t c = 0; c < cfg.grid_w; ++c) {
      for (const auto& o : s.objects)
        if (grid.cell_in_box(r, c, o.box)) grid.at(r, c, o.class_index) += 1.0;
      for (std::size_t k = 0; k < cfg.grid_d; ++k) grid.at(r, c, k) += noise(rng);
    }
  s.feature_grid = std::move(grid);
  s.relations = derive_relations(s.objects, cfg.num_predicates);

  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (unit(rng) >= cfg.gt_question_rate) continue;
    s.qa_candidates.push_back({region_question(region_of(s.objects[i].box, cfg.region_grid), cfg.region_grid),
                               vocab.object_classes[s.objects[i].class_index], true, i});
  }
  return s;
}

/// Shared pool of scene-independent QA pairs used to fill candidate lists.
inline std::vector<QACandidate> build_distractor_corpus(const GenConfig& cfg, std::uint64_t seed) {
  const core::Vocabulary vocab = make_vocabulary(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> class_dist(0, cfg.num_classes - 1);
  std::vector<QACandidate> corpus;
  for (std::size_t r = 0; r < cfg.region_grid * cfg.region_grid; ++r)
    corpus.push_back({region_question(r, cfg.region_grid), vocab.object_classes[class_dist(rng)], false, std::nullopt});
  for (const auto& tmpl : relational_templates())
    for (const auto& subject : vocab.object_classes)
      for (const auto& answer : vocab.object_classes) corpus.push_back({tmpl + subject, answer, false, std::nullopt});
  return corpus;
}

/// Candidate list for one scene: every ground-truth pair plus distractors sampled without
/// replacement. Distractors that mention nothing present in the scene are preferred, then ones
/// naming a present class; questions about an occupied region come last.
inline std::vector<QACandidate> build_candidate_pool(const SceneInstance& scene, const std::vector<QACandidate>& corpus,
                                                     std::uint64_t seed, std::size_t n_cand,
                                                     const core::Vocabulary& vocab, std::size_t region_grid) {
  if (corpus.size() <= n_cand)
    throw Error("pool", "distractor corpus (" + std::to_string(corpus.size()) + ") must be larger than n_cand (" +
                            std::to_string(n_cand) + ")");
  std::vector<QACandidate> pool;
  for (const auto& q : scene.qa_candidates)
    if (q.is_ground_truth) pool.push_back(q);
  if (pool.size() > n_cand)
    throw Error("pool", scene.scene_id + " has more ground-truth QA pairs than n_cand");

  std::set<std::string> occupied_questions;
  std::set<std::string> present_classes;
  for (const auto& o : scene.objects) {
    occupied_questions.insert(region_question(region_of(o.box, region_grid), region_grid));
    present_classes.insert(vocab.object_classes.at(o.class_index));
  }
  auto tier = [&](const QACandidate& q) {
    if (occupied_questions.count(q.question_text)) return 2;
    std::istringstream words(q.question_text);
    std::string w;
    while (words >> w)
      if (present_classes.count(w)) return 1;
    return 0;
  };

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return tier(corpus[a]) < tier(corpus[b]); });
  for (std::size_t k = 0; pool.size() < n_cand; ++k) pool.push_back(corpus[order[k]]);
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

inline std::uint64_t pool_seed(std::uint64_t scene_seed) { return scene_seed ^ 0x9E3779B97F4A7C15ULL; }

/// Scenes for seeds cfg.seed .. cfg.seed + cfg.scenes - 1, each with a pooled candidate list.
inline std::vector<SceneInstance> generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const core::Vocabulary vocab = make_vocabulary(cfg);
  std::vector<SceneInstance> out;
  if (cfg.scenes == 0) return out;
  const auto corpus = build_distractor_corpus(cfg, cfg.seed);
  out.reserve(cfg.scenes);
  for (std::size_t i = 0; i < cfg.scenes; ++i) {
    const std::uint64_t s = cfg.seed + i;
    SceneInstance scene = generate_scene(s, cfg);
    scene.qa_candidates = build_candidate_pool(scene, corpus, pool_seed(s), cfg.n_cand, vocab, cfg.region_grid);
    out.push_back(std::move(scene));
  }
  return out;
}

inline void save_scenes(const std::string& path, const std::vector<SceneInstance>& scenes) {
  std::vector<json> records;
  records.reserve(scenes.size());
  for (const auto& s : scenes) records.push_back(io::to_json(s));
  io::write_jsonl(path, records);
}

struct LoadDiagnostic {
  std::size_t line = 0;
  std::string message;
};

struct LoadResult {
  std::vector<SceneInstance> scenes;
  std::vector<LoadDiagnostic> rejected;
};

/// Reads a JSONL export in the core scene format. With `abort_on_error` the first bad record
/// throws an Error naming its line; otherwise bad records are skipped and reported.
inline LoadResult load_vg_subset(const std::string& path, const core::Vocabulary& vocab, bool abort_on_error = true) {
  LoadResult result;
  std::ifstream probe(path);
  if (!probe) throw Error("io", "missing file " + path);
  std::ifstream in(path);
  std::string text;
  std::size_t lineno = 0;
  while (std::getline(in, text)) {
    ++lineno;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      SceneInstance s = io::scene_from_json(json::parse(text));
      s.validate(vocab);
      result.scenes.push_back(std::move(s));
    } catch (const std::exception& e) {
      const std::string msg = "line " + std::to_string(lineno) + ": " + e.what();
      if (abort_on_error) throw Error("parse", path + " " + msg);
      result.rejected.push_back({lineno, msg});
    }
  }
  return result;
}

}  // namespace sidial::datagen
