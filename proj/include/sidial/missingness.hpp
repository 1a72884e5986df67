#pragma once

// Corruption levels applied to a scene's feature grid.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sidial/core.hpp"
#include "sidial/json_io.hpp"

namespace sidial::missingness {

enum class CorruptionKind { kNone, kObjectBlur, kImageBlur, kSemanticMask };

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kNone: return "none";
    case CorruptionKind::kObjectBlur: return "object_blur";
    case CorruptionKind::kImageBlur: return "image_blur";
    case CorruptionKind::kSemanticMask: return "semantic_mask";
  }
  return "none";
}

inline CorruptionKind corruption_kind_from_string(const std::string& s) {
  if (s == "none") return CorruptionKind::kNone;
  if (s == "object_blur") return CorruptionKind::kObjectBlur;
  if (s == "image_blur") return CorruptionKind::kImageBlur;
  if (s == "semantic_mask") return CorruptionKind::kSemanticMask;
  throw Error("config", "unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kNone;
  double sigma = 0.0;  // grid-cell units, blur kinds only

  bool is_blur() const { return kind == CorruptionKind::kObjectBlur || kind == CorruptionKind::kImageBlur; }

  void validate() const {
    if (is_blur() && !(sigma > 0.0)) throw Error("config", "blur corruption needs sigma > 0");
    if (!(sigma >= 0.0)) throw Error("config", "sigma must be nonnegative");
  }

  std::string label() const {
    if (!is_blur()) return to_string(kind);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s(sigma=%g)", to_string(kind).c_str(), sigma);
    return buf;
  }

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

struct CorruptedScene {
  core::SceneInstance base;
  core::FeatureGrid corrupted_grid;
  CorruptionSpec spec;
};

namespace detail {

/// Symmetric reflection (edge sample repeated) of index i into [0, n).
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(2.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
    const double v = std::exp(-0.5 * static_cast<double>(t * t) / (sigma * sigma));
    k[static_cast<std::size_t>(t + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

}  // namespace detail

/// Separable Gaussian smoothing of every channel with reflect padding.
inline core::FeatureGrid gaussian_blur(const core::FeatureGrid& g, double sigma) {
  const auto kernel = detail::gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto H = static_cast<std::ptrdiff_t>(g.height()), W = static_cast<std::ptrdiff_t>(g.width());
  core::FeatureGrid tmp(g.height(), g.width(), g.depth());
  core::FeatureGrid out(g.height(), g.width(), g.depth());
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < g.depth(); ++k) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t)
          acc += kernel[static_cast<std::size_t>(t + radius)] * g.at(r, detail::reflect_index(c + t, W), k);
        tmp.at(r, c, k) = acc;
      }
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < g.depth(); ++k) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t)
          acc += kernel[static_cast<std::size_t>(t + radius)] * tmp.at(detail::reflect_index(r + t, H), c, k);
        out.at(r, c, k) = acc;
      }
  return out;
}

inline bool cell_in_any_box(const core::SceneInstance& s, std::size_t r, std::size_t c) {
  for (const auto& o : s.objects)
    if (s.feature_grid.cell_in_box(r, c, o.box)) return true;
  return false;
}

inline CorruptedScene apply(const core::SceneInstance& scene, const CorruptionSpec& spec) {
  spec.validate();
  CorruptedScene out{scene, scene.feature_grid, spec};
  const auto& g = scene.feature_grid;
  switch (spec.kind) {
    case CorruptionKind::kNone: break;
    case CorruptionKind::kImageBlur: out.corrupted_grid = gaussian_blur(g, spec.sigma); break;
    case CorruptionKind::kObjectBlur: {
      const core::FeatureGrid blurred = gaussian_blur(g, spec.sigma);
      for (std::size_t r = 0; r < g.height(); ++r)
        for (std::size_t c = 0; c < g.width(); ++c)
          if (cell_in_any_box(scene, r, c))
            for (std::size_t k = 0; k < g.depth(); ++k) out.corrupted_grid.at(r, c, k) = blurred.at(r, c, k);
      break;
    }
    case CorruptionKind::kSemanticMask:
      for (std::size_t r = 0; r < g.height(); ++r)
        for (std::size_t c = 0; c < g.width(); ++c)
          if (cell_in_any_box(scene, r, c))
            for (std::size_t k = 0; k < g.depth(); ++k) out.corrupted_grid.at(r, c, k) = 0.0;
      break;
  }
  return out;
}

inline io::json to_json(const CorruptionSpec& spec) {
  return io::json{{"kind", to_string(spec.kind)}, {"sigma", spec.sigma}};
}

inline CorruptionSpec spec_from_json(const io::json& j) {
  CorruptionSpec spec{corruption_kind_from_string(j.at("kind").get<std::string>()), j.value("sigma", 0.0)};
  spec.validate();
  return spec;
}

/// One JSONL record: the scene fields plus `corrupted_grid` and `corruption`.
inline io::json to_json(const CorruptedScene& c) {
  io::json j = io::to_json(c.base);
  j["corrupted_grid"] = io::to_json(c.corrupted_grid);
  j["corruption"] = to_json(c.spec);
  return j;
}

inline CorruptedScene corrupted_from_json(const io::json& j) {
  CorruptedScene c{io::scene_from_json(j), {}, {}};
  c.corrupted_grid = io::grid_from_json(j.at("corrupted_grid"));
  c.spec = spec_from_json(j.at("corruption"));
  const auto& g = c.base.feature_grid;
  if (c.corrupted_grid.height() != g.height() || c.corrupted_grid.width() != g.width() ||
      c.corrupted_grid.depth() != g.depth())
    throw Error("parse", c.base.scene_id + ": corrupted_grid shape differs from feature_grid");
  return c;
}

inline std::vector<CorruptedScene> load_corrupted(const std::string& path) {
  std::vector<CorruptedScene> out;
  io::for_each_jsonl(path, [&](std::size_t line, const io::json& j) {
    try {
      out.push_back(corrupted_from_json(j));
    } catch (const std::exception& e) {
      throw Error("parse", path + " line " + std::to_string(line) + ": " + e.what());
    }
  });
  return out;
}

}  // namespace sidial::missingness
