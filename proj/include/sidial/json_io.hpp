#pragma once

// JSON / JSONL serialization for the core types.

#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sidial/core.hpp"

namespace sidial::io {

using nlohmann::json;

inline json to_json(const core::BoundingBox& b) { return json::array({b.x, b.y, b.w, b.h}); }

inline core::BoundingBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("parse", "box must be an array of 4 numbers");
  return core::BoundingBox{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json to_json(const core::FeatureGrid& g) {
  json rows = json::array();
  for (std::size_t r = 0; r < g.height(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < g.width(); ++c) {
      json cell = json::array();
      for (std::size_t k = 0; k < g.depth(); ++k) cell.push_back(g.at(r, c, k));
      row.push_back(std::move(cell));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline core::FeatureGrid grid_from_json(const json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty() || !j[0][0].is_array() || j[0][0].empty())
    throw Error("parse", "feature_grid must be a non-empty H x W x D nested array");
  const std::size_t h = j.size(), w = j[0].size(), d = j[0][0].size();
  core::FeatureGrid g(h, w, d);
  for (std::size_t r = 0; r < h; ++r) {
    if (j[r].size() != w) throw Error("parse", "feature_grid rows are ragged");
    for (std::size_t c = 0; c < w; ++c) {
      if (j[r][c].size() != d) throw Error("parse", "feature_grid cells are ragged");
      for (std::size_t k = 0; k < d; ++k) g.at(r, c, k) = j[r][c][k].get<double>();
    }
  }
  return g;
}

inline json to_json(const core::QACandidate& q) {
  json j{{"question", q.question_text}, {"answer", q.answer_text}, {"is_ground_truth", q.is_ground_truth}};
  j["target_object_index"] = q.target_object_index ? json(*q.target_object_index) : json(nullptr);
  return j;
}

inline core::QACandidate qa_from_json(const json& j) {
  core::QACandidate q;
  q.question_text = j.at("question").get<std::string>();
  q.answer_text = j.at("answer").get<std::string>();
  q.is_ground_truth = j.at("is_ground_truth").get<bool>();
  if (j.contains("target_object_index") && !j["target_object_index"].is_null())
    q.target_object_index = j["target_object_index"].get<std::size_t>();
  return q;
}

inline json to_json(const core::SceneInstance& s) {
  json objects = json::array();
  for (const auto& o : s.objects) objects.push_back({{"box", to_json(o.box)}, {"class", o.class_index}});
  json relations = json::array();
  for (const auto& r : s.relations) relations.push_back(json::array({r.subject_index, r.predicate_index, r.object_index}));
  json qa = json::array();
  for (const auto& q : s.qa_candidates) qa.push_back(to_json(q));
  return json{{"scene_id", s.scene_id},
              {"feature_grid", to_json(s.feature_grid)},
              {"objects", std::move(objects)},
              {"relations", std::move(relations)},
              {"qa_candidates", std::move(qa)}};
}

inline core::SceneInstance scene_from_json(const json& j) {
  core::SceneInstance s;
  s.scene_id = j.at("scene_id").get<std::string>();
  s.feature_grid = grid_from_json(j.at("feature_grid"));
  for (const auto& o : j.at("objects"))
    s.objects.push_back({box_from_json(o.at("box")), o.at("class").get<std::size_t>()});
  for (const auto& r : j.at("relations")) {
    if (!r.is_array() || r.size() != 3) throw Error("parse", "relation must be [subject, predicate, object]");
    s.relations.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>(), r[2].get<std::size_t>()});
  }
  for (const auto& q : j.at("qa_candidates")) s.qa_candidates.push_back(qa_from_json(q));
  return s;
}

inline json to_json(const core::Vocabulary& v) {
  return json{{"object_classes", v.object_classes}, {"predicate_classes", v.predicate_classes}};
}

inline core::Vocabulary vocab_from_json(const json& j) {
  core::Vocabulary v;
  v.object_classes = j.at("object_classes").get<std::vector<std::string>>();
  v.predicate_classes = j.at("predicate_classes").get<std::vector<std::string>>();
  v.validate();
  return v;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("parse", path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path);
  out << text;
}

/// Calls `fn(line_number, parsed_json)` for every non-blank line (1-based numbering).
inline void for_each_jsonl(const std::string& path, const std::function<void(std::size_t, const json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error("parse", path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    fn(lineno, j);
  }
}

inline void write_jsonl(const std::string& path, const std::vector<json>& records) {
  std::ostringstream os;
  for (const auto& r : records) os << r.dump() << '\n';
  write_text_file(path, os.str());
}

}  // namespace sidial::io
