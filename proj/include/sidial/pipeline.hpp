#pragma once

// Stepwise training (frozen detector, then dialog + fusion + head), evaluation,
// the corruption x arm x seed experiment matrix and run artifacts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/core.hpp"
#include "sidial/datagen.hpp"
#include "sidial/dialog.hpp"
#include "sidial/fusion.hpp"
#include "sidial/json_io.hpp"
#include "sidial/metrics.hpp"
#include "sidial/missingness.hpp"
#include "sidial/perception.hpp"
#include "sidial/persist.hpp"
#include "sidial/sgg.hpp"

namespace sidial::pipeline {

namespace fs = std::filesystem;
using ad::Mat;
using ad::Tape;
using ad::Var;
using io::json;

enum class Arm { kBaseline, kRandomQa, kSiDial };

inline std::string to_string(Arm a) {
  switch (a) {
    case Arm::kBaseline: return "baseline";
    case Arm::kRandomQa: return "random_qa";
    case Arm::kSiDial: return "si_dial";
  }
  return "baseline";
}

inline Arm arm_from_string(const std::string& s) {
  if (s == "baseline") return Arm::kBaseline;
  if (s == "random_qa") return Arm::kRandomQa;
  if (s == "si_dial") return Arm::kSiDial;
  throw Error("config", "unknown arm '" + s + "' (expected baseline|random_qa|si_dial)");
}

// ---------------------------------------------------------------------------
// Configuration

struct OptimizerConfig {
  double learning_rate = 0.01;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double grad_clip = 5.0;  // max joint grad norm per batch (mean over the batch); 0 disables
};

struct ExperimentConfig {
  datagen::GenConfig gen;
  std::size_t eval_scenes = 100;
  std::vector<missingness::CorruptionSpec> corruptions{{missingness::CorruptionKind::kSemanticMask, 0.0}};
  dialog::DialogConfig dialog;
  fusion::FusionConfig fusion;
  sgg::HeadKind head = sgg::HeadKind::kContext;
  sgg::HeadConfig head_config;
  std::vector<Arm> arms{Arm::kBaseline, Arm::kRandomQa, Arm::kSiDial};
  OptimizerConfig optimizer;
  perception::DetectorConfig detector;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out = "out";
  std::string train_data;  // optional JSONL scene files replacing generated splits
  std::string eval_data;

  void validate() const {
    gen.validate();
    dialog.validate();
    if (seeds.empty()) throw Error("config", "seeds must be nonempty");
    if (arms.empty()) throw Error("config", "arms must be nonempty");
    if (corruptions.empty()) throw Error("config", "corruptions must be nonempty");
    for (const auto& c : corruptions) c.validate();
    if (dialog.n_cand != gen.n_cand) throw Error("config", "dialog.n_cand must equal gen.n_cand");
    if (fusion.d_k == 0) throw Error("config", "fusion.d_k must be positive");
    if (!(optimizer.learning_rate > 0.0)) throw Error("config", "optimizer.learning_rate must be positive");
    if (optimizer.batch_size == 0) throw Error("config", "optimizer.batch_size must be positive");
    if (eval_scenes == 0 && eval_data.empty()) throw Error("config", "eval_scenes must be positive");
  }

  /// Checks that referenced input files exist; called when a run starts.
  void check_files() const {
    for (const auto* p : {&train_data, &eval_data})
      if (!p->empty() && !fs::exists(*p)) throw Error("io", "referenced file does not exist: " + *p);
  }
};

inline json to_json(const ExperimentConfig& c) {
  json corr = json::array();
  for (const auto& s : c.corruptions) corr.push_back(missingness::to_json(s));
  json arms = json::array();
  for (Arm a : c.arms) arms.push_back(to_string(a));
  json j{{"gen", datagen::to_json(c.gen)},
         {"eval_scenes", c.eval_scenes},
         {"corruptions", corr},
         {"dialog",
          {{"rounds", c.dialog.rounds},
           {"n_cand", c.dialog.n_cand},
           {"d_q", c.dialog.d_q},
           {"d_h", c.dialog.d_h},
           {"selection_mode", dialog::to_string(c.dialog.selection_mode)},
           {"no_repeat", c.dialog.no_repeat},
           {"tau", c.dialog.tau}}},
         {"fusion", {{"d_k", c.fusion.d_k}}},
         {"sgg_head", sgg::to_string(c.head)},
         {"head",
          {{"context_width", c.head_config.context_width},
           {"predicate_hidden", c.head_config.predicate_hidden},
           {"freq_alpha", c.head_config.freq_alpha}}},
         {"arms", arms},
         {"optimizer",
          {{"learning_rate", c.optimizer.learning_rate},
           {"epochs", c.optimizer.epochs},
           {"batch_size", c.optimizer.batch_size},
           {"grad_clip", c.optimizer.grad_clip}}},
         {"detector",
          {{"epochs", c.detector.epochs},
           {"learning_rate", c.detector.learning_rate},
           {"threshold", c.detector.threshold},
           {"max_detections", c.detector.max_detections},
           {"seed", c.detector.seed}}},
         {"seeds", c.seeds},
         {"out", c.out}};
  if (!c.train_data.empty()) j["train_data"] = c.train_data;
  if (!c.eval_data.empty()) j["eval_data"] = c.eval_data;
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("gen")) c.gen = datagen::gen_config_from_json(j["gen"]);
    c.eval_scenes = j.value("eval_scenes", c.eval_scenes);
    if (j.contains("corruptions")) {
      c.corruptions.clear();
      for (const auto& s : j["corruptions"]) c.corruptions.push_back(missingness::spec_from_json(s));
    }
    if (j.contains("dialog")) {
      const auto& d = j["dialog"];
      c.dialog.rounds = d.value("rounds", c.dialog.rounds);
      c.dialog.n_cand = d.value("n_cand", c.gen.n_cand);
      c.dialog.d_q = d.value("d_q", c.dialog.d_q);
      c.dialog.d_h = d.value("d_h", c.dialog.d_h);
      c.dialog.selection_mode =
          dialog::selection_mode_from_string(d.value("selection_mode", dialog::to_string(c.dialog.selection_mode)));
      c.dialog.no_repeat = d.value("no_repeat", c.dialog.no_repeat);
      c.dialog.tau = d.value("tau", c.dialog.tau);
    } else {
      c.dialog.n_cand = c.gen.n_cand;
    }
    if (j.contains("fusion")) c.fusion.d_k = j["fusion"].value("d_k", c.fusion.d_k);
    c.head = sgg::head_kind_from_string(j.value("sgg_head", sgg::to_string(c.head)));
    if (j.contains("head")) {
      const auto& h = j["head"];
      c.head_config.context_width = h.value("context_width", c.head_config.context_width);
      c.head_config.predicate_hidden = h.value("predicate_hidden", c.head_config.predicate_hidden);
      c.head_config.freq_alpha = h.value("freq_alpha", c.head_config.freq_alpha);
    }
    if (j.contains("arms")) {
      c.arms.clear();
      for (const auto& a : j["arms"]) c.arms.push_back(arm_from_string(a.get<std::string>()));
    } else if (j.contains("arm")) {
      c.arms = {arm_from_string(j["arm"].get<std::string>())};
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
      c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
      c.optimizer.grad_clip = o.value("grad_clip", c.optimizer.grad_clip);
    }
    if (j.contains("detector")) {
      const auto& d = j["detector"];
      c.detector.epochs = d.value("epochs", c.detector.epochs);
      c.detector.learning_rate = d.value("learning_rate", c.detector.learning_rate);
      c.detector.threshold = d.value("threshold", c.detector.threshold);
      c.detector.max_detections = d.value("max_detections", c.detector.max_detections);
      c.detector.seed = d.value("seed", c.detector.seed);
    }
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.out = j.value("out", c.out);
    c.train_data = j.value("train_data", std::string());
    c.eval_data = j.value("eval_data", std::string());
  } catch (const json::exception& e) {
    throw Error("config", std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(io::read_json_file(path)); }

/// FNV-1a over the canonical (key-sorted) JSON dump; the output directory is not part of it.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("out");
  persist::Fnv1a64 h;
  h.update(j.dump());
  return persist::hex(h.digest());
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Data

struct CellData {
  core::Vocabulary vocab;
  std::vector<missingness::CorruptedScene> train;
  std::vector<missingness::CorruptedScene> eval;
};

/// Generated splits use disjoint scene-seed ranges derived from (gen.seed, run seed).
inline std::vector<core::SceneInstance> make_split(const ExperimentConfig& cfg, std::uint64_t seed, bool eval) {
  const std::string& path = eval ? cfg.eval_data : cfg.train_data;
  if (!path.empty()) {
    auto loaded = datagen::load_vg_subset(path, datagen::make_vocabulary(cfg.gen));
    for (const auto& s : loaded.scenes)
      if (s.qa_candidates.size() != cfg.dialog.n_cand)
        throw Error("data", s.scene_id + " in " + path + " is not pooled to n_cand candidates");
    return std::move(loaded.scenes);
  }
  datagen::GenConfig g = cfg.gen;
  g.seed = cfg.gen.seed + seed * 10'000'019ULL + (eval ? 5'000'000ULL : 0ULL);
  if (eval) g.scenes = cfg.eval_scenes;
  return datagen::generate_dataset(g);
}

inline std::vector<missingness::CorruptedScene> corrupt_all(const std::vector<core::SceneInstance>& scenes,
                                                            const missingness::CorruptionSpec& spec) {
  std::vector<missingness::CorruptedScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(missingness::apply(s, spec));
  return out;
}

inline CellData prepare_data(const ExperimentConfig& cfg, const missingness::CorruptionSpec& spec, std::uint64_t seed) {
  cfg.check_files();
  CellData d{datagen::make_vocabulary(cfg.gen), corrupt_all(make_split(cfg, seed, false), spec),
             corrupt_all(make_split(cfg, seed, true), spec)};
  if (d.train.empty()) throw Error("data", "training split is empty");
  return d;
}

inline perception::DetectorParams train_detector(const ExperimentConfig& cfg, const CellData& data) {
  return perception::train_detector(data.train, data.vocab.num_objects(), cfg.detector);
}

// ---------------------------------------------------------------------------
// Model

struct Model {
  Arm arm = Arm::kBaseline;
  dialog::DialogParams dialog;
  fusion::FusionParams fusion;
  sgg::HeadParams head;

  bool uses_dialog() const { return arm != Arm::kBaseline; }

  /// Parameters the arm's optimizer updates. The question decoder is trained by si_dial only.
  std::vector<ad::Parameter*> trainable() {
    std::vector<ad::Parameter*> out = head.parameters();
    if (uses_dialog()) {
      for (auto* p : fusion.parameters()) out.push_back(p);
      dialog.history_encoder.collect(out);
      dialog.qa_fusion.collect(out);
    }
    if (arm == Arm::kSiDial) dialog.question_decoder.collect(out);
    return out;
  }

  std::vector<ad::Parameter*> all() {
    std::vector<ad::Parameter*> out = dialog.parameters();
    for (auto* p : fusion.parameters()) out.push_back(p);
    for (auto* p : head.parameters()) out.push_back(p);
    return out;
  }
};

/// Every arm draws the same initial values for the modules it shares with the others.
inline Model init_model(const ExperimentConfig& cfg, Arm arm, Eigen::Index d, const core::Vocabulary& vocab,
                        std::uint64_t seed) {
  std::mt19937_64 rng(mix(seed, 0x5EED));
  Model m;
  m.arm = arm;
  m.dialog = dialog::DialogParams(d, cfg.dialog, rng);
  m.fusion = fusion::FusionParams(d, static_cast<Eigen::Index>(cfg.dialog.d_h), cfg.fusion, rng);
  m.head = sgg::HeadParams(cfg.head, d, vocab.num_objects(), vocab.num_predicates(), cfg.head_config, rng);
  return m;
}

inline const char* kFreqCountsTensor = "head.freq_counts";

inline void save_model(const std::string& path, Model& m) {
  persist::NamedTensors t = persist::collect(m.all());
  if (m.head.kind == sgg::HeadKind::kFreq) {
    const auto& counts = m.head.table.counts();
    t[kFreqCountsTensor] = Eigen::Map<const Mat>(counts.data(), 1, static_cast<Eigen::Index>(counts.size()));
  }
  persist::save_tensors(path, t);
}

inline void load_model(const std::string& path, Model& m) {
  if (!fs::exists(path)) throw Error("artifact", "missing parameter file " + path);
  const persist::NamedTensors t = persist::load_tensors(path);
  persist::assign(t, m.all());
  if (m.head.kind == sgg::HeadKind::kFreq) {
    auto it = t.find(kFreqCountsTensor);
    auto& counts = m.head.table.counts();
    if (it == t.end() || it->second.size() != static_cast<Eigen::Index>(counts.size()))
      throw Error("artifact", path + " lacks the frequency table");
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] = it->second(0, static_cast<Eigen::Index>(k));
  }
}

// ---------------------------------------------------------------------------
// Forward pass shared by training and evaluation

struct Forward {
  sgg::HeadGraph head;
  std::vector<std::size_t> asked;
};

inline Forward forward(Tape& tape, Model& m, const ExperimentConfig& cfg, const perception::PreliminaryObjectSet& o,
                       const dialog::CandidateSet* cands, dialog::SelectionMode mode, std::uint64_t random_seed) {
  Var nodes = tape.constant(o.node_features);
  Var edges = tape.constant(o.edge_features);
  Forward f;
  if (m.uses_dialog()) {
    if (!cands) throw Error("pipeline", "dialog arms need a candidate set");
    const auto policy = m.arm == Arm::kRandomQa ? dialog::Policy::kRandom : dialog::Policy::kLearned;
    dialog::DialogGraph g = dialog::run_dialog_graph(tape, m.dialog, cfg.dialog, nodes, *cands, policy, mode, random_seed);
    fusion::UpdateGraph u = fusion::update_vision_graph(tape, m.fusion, nodes, edges, fusion::memory_graph(g.qa, g.history));
    nodes = u.nodes;
    edges = u.edges;
    f.asked = std::move(g.indices);
  }
  f.head = sgg::head_graph(tape, m.head, nodes, edges, o.pairs);
  return f;
}

struct Targets {
  Mat objects;     // n x |C| one-hot
  Mat predicates;  // m x |P|, uniform over the GT predicates of the pair, background when none
};

inline Targets make_targets(const core::SceneInstance& s, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                            std::size_t num_classes, std::size_t num_predicates) {
  const std::size_t n = s.objects.size();
  Targets t{Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(num_classes)),
            Mat::Zero(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(num_predicates))};
  for (std::size_t i = 0; i < n; ++i) t.objects(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s.objects[i].class_index)) = 1.0;
  std::map<std::pair<std::size_t, std::size_t>, Eigen::Index> row;
  for (std::size_t e = 0; e < pairs.size(); ++e) row[pairs[e]] = static_cast<Eigen::Index>(e);
  for (const auto& r : s.relations)
    t.predicates(row.at({r.subject_index, r.object_index}), static_cast<Eigen::Index>(r.predicate_index)) = 1.0;
  for (Eigen::Index e = 0; e < t.predicates.rows(); ++e) {
    const double total = t.predicates.row(e).sum();
    if (total == 0.0)
      t.predicates(e, 0) = 1.0;
    else
      t.predicates.row(e) /= total;
  }
  return t;
}

inline Var scene_loss(const Forward& f, const Targets& t) {
  Var loss = ad::soft_cross_entropy(f.head.object_logits, t.objects);
  if (f.head.has_predicate_logits) loss = ad::add(loss, ad::soft_cross_entropy(f.head.predicate_logits, t.predicates));
  return loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainStats {
  std::string detector_hash_before;
  std::string detector_hash_after;
  std::string decoder_hash_before;
  std::string decoder_hash_after;
  std::vector<double> epoch_loss;
};

inline std::uint64_t hash_detector(const perception::DetectorParams& d) {
  persist::Fnv1a64 h;
  h.update(d.weights);
  h.update(d.bias);
  h.update(&d.threshold, sizeof d.threshold);
  return h.digest();
}

using ProgressFn = std::function<void(const std::string&)>;

/// Stage 2: the detector is read-only here; the arm's modules are fit with Adam on the
/// summed object and predicate cross-entropy over GT boxes.
inline TrainStats train_model(const ExperimentConfig& cfg, Model& m, const CellData& data,
                              const perception::DetectorParams& detector, std::uint64_t seed,
                              const ProgressFn& progress = {}) {
  if (!detector.trained) throw Error("pipeline", "stage 2 needs a trained detector");
  TrainStats st;
  const std::uint64_t det_before = hash_detector(detector);
  const std::uint64_t dec_before = persist::hash_parameters(m.dialog.decoder_parameters());
  st.detector_hash_before = persist::hex(det_before);
  st.decoder_hash_before = persist::hex(dec_before);

  std::vector<core::SceneInstance> base;
  base.reserve(data.train.size());
  for (const auto& s : data.train) base.push_back(s.base);
  if (m.head.kind == sgg::HeadKind::kFreq) {
    m.head.table = sgg::fit_freq_table(base, data.vocab, cfg.head_config.freq_alpha);
    m.head.init_from_detector(detector);
  }

  const dialog::HashingEncoder encoder(cfg.dialog.d_q);
  std::vector<perception::PreliminaryObjectSet> objects;
  std::vector<dialog::CandidateSet> cands;
  std::vector<Targets> targets;
  for (const auto& s : data.train) {
    objects.push_back(perception::detect(s, detector, perception::BoxMode::kGroundTruth));
    if (m.uses_dialog()) cands.push_back(dialog::encode_candidates(s.base, encoder));
    targets.push_back(make_targets(s.base, objects.back().pairs, data.vocab.num_objects(), data.vocab.num_predicates()));
  }

  ad::Adam adam(ad::AdamConfig{cfg.optimizer.learning_rate});
  const auto params = m.trainable();
  for (auto* p : m.all()) p->zero_grad();
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix(seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.optimizer.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.optimizer.batch_size);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t k = order[b];
        Tape tape;
        const Forward f = forward(tape, m, cfg, objects[k], m.uses_dialog() ? &cands[k] : nullptr,
                                  cfg.dialog.selection_mode, mix(mix(seed, epoch), k));
        Var loss = scene_loss(f, targets[k]);
        const double v = loss.value()(0, 0);
        if (!std::isfinite(v)) {
          std::ostringstream os;
          os << "non-finite loss (" << v << ") at epoch " << epoch << ", scene " << data.train[k].base.scene_id
             << ", arm " << to_string(m.arm) << ", seed " << seed;
          throw Error("diverged", os.str());
        }
        total += v;
        tape.backward(loss);
      }
      const double batch = static_cast<double>(end - start);
      ad::clip_grad_norm(params, cfg.optimizer.grad_clip * batch);
      adam.step(params, batch);
      for (auto* p : m.all()) p->zero_grad();
    }
    st.epoch_loss.push_back(total / static_cast<double>(order.size()));
    if (progress) {
      std::ostringstream os;
      os << to_string(m.arm) << " seed " << seed << " epoch " << epoch + 1 << "/" << cfg.optimizer.epochs
         << " loss " << st.epoch_loss.back();
      progress(os.str());
    }
  }

  const std::uint64_t det_after = hash_detector(detector);
  const std::uint64_t dec_after = persist::hash_parameters(m.dialog.decoder_parameters());
  st.detector_hash_after = persist::hex(det_after);
  st.decoder_hash_after = persist::hex(dec_after);
  if (det_after != det_before) throw Error("invariant", "detector parameters changed during stage 2");
  if (m.arm != Arm::kSiDial && dec_after != dec_before)
    throw Error("invariant", to_string(m.arm) + " arm updated question-decoder parameters");
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<json> transcripts;
};

/// Hard selection; SGCls and PredCls share one forward pass on GT boxes, SGDet runs on proposals.
inline Evaluation evaluate_model(const ExperimentConfig& cfg, Model& m, const CellData& data,
                                 const perception::DetectorParams& detector, std::uint64_t seed) {
  const dialog::HashingEncoder encoder(cfg.dialog.d_q);
  std::vector<metrics::ScoredScene> predcls, sgcls, sgdet;
  Evaluation ev;
  for (std::size_t k = 0; k < data.eval.size(); ++k) {
    const auto& s = data.eval[k];
    const metrics::GroundTruth gt = metrics::GroundTruth::from_scene(s.base);
    std::optional<dialog::CandidateSet> cands;
    if (m.uses_dialog()) cands = dialog::encode_candidates(s.base, encoder);
    const std::uint64_t rseed = mix(mix(seed, 0xE7A1), k);

    const auto o = perception::detect(s, detector, perception::BoxMode::kGroundTruth);
    {
      Tape tape;
      const Forward f = forward(tape, m, cfg, o, cands ? &*cands : nullptr, dialog::SelectionMode::kHard, rseed);
      sgcls.push_back({sgg::to_prediction(m.head, f.head, o.boxes, o.pairs), gt});
      predcls.push_back({sgg::to_prediction(m.head, f.head, o.boxes, o.pairs, &gt.labels), gt});
      json rounds = json::array();
      for (std::size_t idx : f.asked)
        rounds.push_back({{"index", idx},
                          {"question", s.base.qa_candidates[idx].question_text},
                          {"answer", dialog::answer_oracle(s.base, idx)}});
      ev.transcripts.push_back({{"scene_id", s.base.scene_id}, {"rounds", rounds}});
    }
    const auto od = perception::detect(s, detector, perception::BoxMode::kPredicted);
    {
      Tape tape;
      const Forward f = forward(tape, m, cfg, od, cands ? &*cands : nullptr, dialog::SelectionMode::kHard, rseed);
      sgdet.push_back({sgg::to_prediction(m.head, f.head, od.boxes, od.pairs), gt});
    }
  }
  const std::size_t P = data.vocab.num_predicates();
  metrics::add_protocol(ev.report, predcls, metrics::Protocol::kPredCls, P);
  metrics::add_protocol(ev.report, sgcls, metrics::Protocol::kSgCls, P);
  metrics::add_protocol(ev.report, sgdet, metrics::Protocol::kSgDet, P);
  ev.report.validate();
  return ev;
}

// ---------------------------------------------------------------------------
// Runs and artifacts

struct RunPaths {
  fs::path dir;  // <out>/<corruption>/seed-<s>
  fs::path detector() const { return dir / "detector.json"; }
  fs::path arm_dir(Arm a) const { return dir / to_string(a); }
  fs::path params(Arm a) const { return arm_dir(a) / ("params-" + to_string(a) + ".bin"); }
  fs::path report(Arm a) const { return arm_dir(a) / "report.json"; }
  fs::path transcripts(Arm a) const { return arm_dir(a) / "transcripts.jsonl"; }
};

inline std::string slug(const missingness::CorruptionSpec& spec) {
  if (!spec.is_blur()) return missingness::to_string(spec.kind);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-s%g", missingness::to_string(spec.kind).c_str(), spec.sigma);
  return buf;
}

inline RunPaths run_paths(const ExperimentConfig& cfg, const missingness::CorruptionSpec& spec, std::uint64_t seed) {
  return {fs::path(cfg.out) / slug(spec) / ("seed-" + std::to_string(seed))};
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::optional<metrics::MetricsReport> report;
  TrainStats stats;
  std::map<std::string, std::string> artifacts;
};

struct RunRecord {
  std::string config_hash;
  Arm arm = Arm::kBaseline;
  missingness::CorruptionSpec corruption;
  std::vector<SeedRun> runs;
  double wall_clock_seconds = 0.0;
};

inline void write_detector(const fs::path& path, const perception::DetectorParams& d) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_text_file(path.string(), perception::to_json(d).dump() + "\n");
}

inline perception::DetectorParams read_detector(const fs::path& path) {
  if (!fs::exists(path)) throw Error("artifact", "missing detector " + path.string());
  return perception::detector_from_json(io::read_json_file(path.string()));
}

/// Returns the detector at `paths`, training and saving it first when absent.
inline perception::DetectorParams ensure_detector(const ExperimentConfig& cfg, const CellData& data, const RunPaths& paths) {
  if (fs::exists(paths.detector())) return read_detector(paths.detector());
  perception::DetectorParams d = train_detector(cfg, data);
  write_detector(paths.detector(), d);
  return d;
}

inline SeedRun train_seed(const ExperimentConfig& cfg, Arm arm, const missingness::CorruptionSpec& spec,
                          std::uint64_t seed, const CellData& data, const ProgressFn& progress = {}) {
  const RunPaths paths = run_paths(cfg, spec, seed);
  const perception::DetectorParams detector = ensure_detector(cfg, data, paths);
  const Eigen::Index d = static_cast<Eigen::Index>(data.train.front().corrupted_grid.depth()) + 4;
  Model m = init_model(cfg, arm, d, data.vocab, seed);
  SeedRun run;
  run.seed = seed;
  run.stats = train_model(cfg, m, data, detector, seed, progress);
  fs::create_directories(paths.arm_dir(arm));
  save_model(paths.params(arm).string(), m);
  run.artifacts = {{"detector", paths.detector().string()}, {"params", paths.params(arm).string()}};
  return run;
}

/// Stage 1 and stage 2 for every seed of one (corruption, arm) cell.
inline RunRecord train(const ExperimentConfig& cfg, Arm arm, const missingness::CorruptionSpec& spec,
                       const ProgressFn& progress = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec{config_hash(cfg), arm, spec, {}, 0.0};
  for (std::uint64_t seed : cfg.seeds) rec.runs.push_back(train_seed(cfg, arm, spec, seed, prepare_data(cfg, spec, seed), progress));
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline json report_json(const ExperimentConfig& cfg, Arm arm, const missingness::CorruptionSpec& spec,
                        std::uint64_t seed, const metrics::MetricsReport& r, const core::Vocabulary& vocab) {
  return {{"config_hash", config_hash(cfg)},
          {"arm", to_string(arm)},
          {"corruption", missingness::to_json(spec)},
          {"seed", seed},
          {"metrics", metrics::to_json(r, vocab)}};
}

/// Loads the saved detector and parameters of one seed and writes report.json and transcripts.jsonl.
inline metrics::MetricsReport evaluate_seed(const ExperimentConfig& cfg, Arm arm, const missingness::CorruptionSpec& spec,
                                            std::uint64_t seed, const CellData& data) {
  const RunPaths paths = run_paths(cfg, spec, seed);
  const perception::DetectorParams detector = read_detector(paths.detector());
  const Eigen::Index d = static_cast<Eigen::Index>(data.eval.empty() ? data.train.front().corrupted_grid.depth()
                                                                      : data.eval.front().corrupted_grid.depth()) + 4;
  Model m = init_model(cfg, arm, d, data.vocab, seed);
  load_model(paths.params(arm).string(), m);
  const Evaluation ev = evaluate_model(cfg, m, data, detector, seed);
  io::write_text_file(paths.report(arm).string(), report_json(cfg, arm, spec, seed, ev.report, data.vocab).dump(2) + "\n");
  io::write_jsonl(paths.transcripts(arm).string(), ev.transcripts);
  return ev.report;
}

inline void evaluate(const ExperimentConfig& cfg, RunRecord& rec) {
  for (auto& run : rec.runs) {
    run.report = evaluate_seed(cfg, rec.arm, rec.corruption, run.seed, prepare_data(cfg, rec.corruption, run.seed));
    const RunPaths paths = run_paths(cfg, rec.corruption, run.seed);
    run.artifacts["report"] = paths.report(rec.arm).string();
    run.artifacts["transcripts"] = paths.transcripts(rec.arm).string();
  }
}

inline json to_json(const RunRecord& r) {
  json runs = json::array();
  for (const auto& s : r.runs) {
    json j{{"seed", s.seed},
           {"artifacts", s.artifacts},
           {"detector_hash", {{"before", s.stats.detector_hash_before}, {"after", s.stats.detector_hash_after}}},
           {"decoder_hash", {{"before", s.stats.decoder_hash_before}, {"after", s.stats.decoder_hash_after}}},
           {"epoch_loss", s.stats.epoch_loss}};
    runs.push_back(std::move(j));
  }
  return {{"config_hash", r.config_hash},
          {"arm", to_string(r.arm)},
          {"corruption", missingness::to_json(r.corruption)},
          {"runs", runs},
          {"wall_clock_seconds", r.wall_clock_seconds}};
}

// ---------------------------------------------------------------------------
// Experiment matrix

struct CellResult {
  missingness::CorruptionSpec corruption;
  Arm arm = Arm::kBaseline;
  std::vector<std::uint64_t> seeds;                // seeds that completed
  std::vector<metrics::MetricsReport> reports;     // parallel to seeds
  std::vector<TrainStats> stats;                   // parallel to seeds
  std::vector<std::string> failures;               // "seed N: message"

  std::vector<double> values(metrics::Protocol p, std::size_t k) const {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.at(p, k));
    return v;
  }
};

struct ExperimentTable {
  std::vector<CellResult> cells;

  const CellResult& cell(const missingness::CorruptionSpec& c, Arm a) const {
    for (const auto& x : cells)
      if (x.corruption == c && x.arm == a) return x;
    throw Error("table", "no cell for " + c.label() + " / " + to_string(a));
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Rows: corruption x arm; columns: protocol x K, mean +- sample std over seeds (in percent).
inline std::string render_markdown(const ExperimentTable& t) {
  std::ostringstream os;
  os << "| vision input | model |";
  for (auto p : metrics::kProtocols)
    for (auto k : metrics::kRecallKs) os << ' ' << metrics::to_string(p) << " mR@" << k << " |";
  os << " seeds |\n|---|---|";
  for (std::size_t i = 0; i < metrics::kProtocols.size() * metrics::kRecallKs.size(); ++i) os << "---|";
  os << "---|\n";
  char buf[64];
  for (const auto& c : t.cells) {
    os << "| " << c.corruption.label() << " | " << to_string(c.arm) << " |";
    for (auto p : metrics::kProtocols)
      for (auto k : metrics::kRecallKs) {
        const auto [m, s] = mean_std(c.values(p, k));
        if (std::isnan(m))
          os << " n/a |";
        else {
          std::snprintf(buf, sizeof buf, " %.2f ± %.2f |", 100.0 * m, 100.0 * s);
          os << buf;
        }
      }
    os << ' ' << c.seeds.size() << '/' << c.seeds.size() + c.failures.size() << " |\n";
  }
  for (const auto& c : t.cells)
    for (const auto& f : c.failures) os << "\nfailed: " << c.corruption.label() << " / " << to_string(c.arm) << " " << f << "\n";
  return os.str();
}

inline std::string render_csv(const ExperimentTable& t) {
  std::ostringstream os;
  os << "corruption,sigma,arm";
  for (auto p : metrics::kProtocols)
    for (auto k : metrics::kRecallKs)
      os << ',' << metrics::to_string(p) << "_mR@" << k << "_mean," << metrics::to_string(p) << "_mR@" << k << "_std";
  os << ",seeds_ok,seeds_failed\n";
  char buf[64];
  for (const auto& c : t.cells) {
    std::snprintf(buf, sizeof buf, "%g", c.corruption.sigma);
    os << missingness::to_string(c.corruption.kind) << ',' << buf << ',' << to_string(c.arm);
    for (auto p : metrics::kProtocols)
      for (auto k : metrics::kRecallKs) {
        const auto [m, s] = mean_std(c.values(p, k));
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f", m, s);
        os << buf;
      }
    os << ',' << c.seeds.size() << ',' << c.failures.size() << '\n';
  }
  return os.str();
}

/// Runs every (corruption, arm, seed) cell; a failing cell is recorded and the run continues.
/// Data and detector are shared by the arms of one (corruption, seed).
inline ExperimentTable run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  ExperimentTable table;
  for (const auto& spec : cfg.corruptions)
    for (Arm a : cfg.arms) table.cells.push_back({spec, a, {}, {}, {}, {}});
  auto cell_of = [&](const missingness::CorruptionSpec& spec, Arm a) -> CellResult& {
    for (auto& c : table.cells)
      if (c.corruption == spec && c.arm == a) return c;
    throw Error("table", "cell missing");
  };
  for (const auto& spec : cfg.corruptions)
    for (std::uint64_t seed : cfg.seeds) {
      std::optional<CellData> data;
      try {
        data = prepare_data(cfg, spec, seed);
        write_detector(run_paths(cfg, spec, seed).detector(), train_detector(cfg, *data));
      } catch (const std::exception& e) {
        for (Arm a : cfg.arms) cell_of(spec, a).failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
        continue;
      }
      for (Arm a : cfg.arms) {
        try {
          SeedRun run = train_seed(cfg, a, spec, seed, *data, progress);
          auto report = evaluate_seed(cfg, a, spec, seed, *data);
          auto& c = cell_of(spec, a);
          c.seeds.push_back(seed);
          c.reports.push_back(std::move(report));
          c.stats.push_back(std::move(run.stats));
          if (progress) {
            std::ostringstream os;
            os << spec.label() << " / " << to_string(a) << " seed " << seed
               << ": sgcls mR@20 = " << c.reports.back().at(metrics::Protocol::kSgCls, 20);
            progress(os.str());
          }
        } catch (const std::exception& e) {
          cell_of(spec, a).failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
        }
      }
    }
  fs::create_directories(cfg.out);
  io::write_text_file((fs::path(cfg.out) / "table.md").string(), render_markdown(table));
  io::write_text_file((fs::path(cfg.out) / "table.csv").string(), render_csv(table));
  return table;
}

}  // namespace sidial::pipeline
