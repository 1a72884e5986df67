#pragma once

// Multi-round discriminative dialog: question selection from a candidate pool,
// oracle answers and a fixed-width history encoding.
//
// Every learned computation is written once against the autodiff tape (the
// *_graph functions). The value-level API below runs those graphs on a scratch
// tape, so training and inference share a single code path.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/core.hpp"
#include "sidial/perception.hpp"

namespace sidial::dialog {

using ad::Mat;
using ad::RowVec;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Question encoder

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Maps text to a fixed-width embedding. Implementations must be deterministic.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t width() const = 0;
  virtual RowVec encode(const std::string& text) const = 0;
};

/// Bag of words: every token increments one of `width` hash buckets, counts L2-normalized.
class HashingEncoder final : public TextEncoder {
 public:
  explicit HashingEncoder(std::size_t width) : width_(width) {
    if (width == 0) throw Error("config", "encoder width must be positive");
  }

  std::size_t width() const override { return width_; }

  std::size_t bucket(const std::string& token) const { return static_cast<std::size_t>(fnv1a(token) % width_); }

  RowVec encode(const std::string& text) const override {
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw Error("encoding", "cannot encode empty or whitespace-only text");
    RowVec v = RowVec::Zero(static_cast<Eigen::Index>(width_));
    for (const auto& t : tokens) v(static_cast<Eigen::Index>(bucket(t))) += 1.0;
    return v / v.norm();
  }

 private:
  std::size_t width_;
};

inline RowVec encode_question(const std::string& text, const TextEncoder& encoder) { return encoder.encode(text); }

// ---------------------------------------------------------------------------
// Configuration, state and parameters

enum class SelectionMode { kHard, kSoft, kStraightThrough };

inline std::string to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::kHard: return "hard";
    case SelectionMode::kSoft: return "soft";
    case SelectionMode::kStraightThrough: return "straight_through";
  }
  return "hard";
}

inline SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "hard") return SelectionMode::kHard;
  if (s == "soft") return SelectionMode::kSoft;
  if (s == "straight_through") return SelectionMode::kStraightThrough;
  throw Error("config", "unknown selection_mode '" + s + "'");
}

struct DialogConfig {
  std::size_t rounds = 10;
  std::size_t n_cand = 100;
  std::size_t d_q = 128;
  std::size_t d_h = 32;
  SelectionMode selection_mode = SelectionMode::kStraightThrough;  // used while training
  bool no_repeat = true;
  double tau = 0.5;

  void validate() const {
    if (rounds < 1) throw Error("config", "DialogConfig: rounds must be >= 1");
    if (no_repeat && n_cand < rounds) throw Error("config", "DialogConfig: n_cand must be >= rounds with no_repeat");
    if (d_q == 0 || d_h == 0 || n_cand == 0) throw Error("config", "DialogConfig: widths must be positive");
    if (!(tau > 0.0)) throw Error("config", "DialogConfig: tau must be positive");
  }
};

struct EncodedQA {
  RowVec x_q;
  RowVec x_a;
  RowVec x_qa;
};

struct DialogState {
  RowVec history;
  std::vector<std::pair<std::size_t, EncodedQA>> selected;
  std::size_t round = 0;

  static DialogState initial(std::size_t d_h) { return DialogState{RowVec::Zero(static_cast<Eigen::Index>(d_h)), {}, 0}; }

  std::vector<bool> allowed(std::size_t n_cand, bool no_repeat) const {
    std::vector<bool> mask(n_cand, true);
    if (no_repeat)
      for (const auto& [idx, qa] : selected) mask.at(idx) = false;
    return mask;
  }
};

struct DialogParams {
  ad::ResidualMixer question_decoder;  // [mean V' , history] -> d_q
  ad::ResidualMixer history_encoder;   // [history, x_qa] -> d_h
  ad::Linear qa_fusion;                // [x_q, x_a] -> d_h

  DialogParams() = default;
  DialogParams(Eigen::Index feature_width, const DialogConfig& cfg, std::mt19937_64& rng) {
    const auto dq = static_cast<Eigen::Index>(cfg.d_q), dh = static_cast<Eigen::Index>(cfg.d_h);
    question_decoder = ad::ResidualMixer("dialog.question_decoder", feature_width + dh, dq, dq, rng);
    history_encoder = ad::ResidualMixer("dialog.history_encoder", 2 * dh, dh, dh, rng);
    qa_fusion = ad::Linear("dialog.qa_fusion", 2 * dq, dh, rng);
  }

  std::vector<ad::Parameter*> decoder_parameters() {
    std::vector<ad::Parameter*> out;
    question_decoder.collect(out);
    return out;
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out = decoder_parameters();
    history_encoder.collect(out);
    qa_fusion.collect(out);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Candidates and oracle

inline const std::string& answer_oracle(const core::SceneInstance& scene, std::size_t cand_index) {
  if (cand_index >= scene.qa_candidates.size())
    throw Error("oracle", "candidate index " + std::to_string(cand_index) + " out of range for " + scene.scene_id);
  return scene.qa_candidates[cand_index].answer_text;
}

/// Pre-encoded candidate pool of one scene.
struct CandidateSet {
  Mat questions;  // N x d_q, unit rows
  Mat answers;    // N x d_q, unit rows
  Mat pairs;      // N x 2 d_q, [question, answer]

  std::size_t size() const { return static_cast<std::size_t>(questions.rows()); }
};

inline CandidateSet encode_candidates(const core::SceneInstance& scene, const TextEncoder& encoder) {
  const auto n = static_cast<Eigen::Index>(scene.qa_candidates.size());
  const auto w = static_cast<Eigen::Index>(encoder.width());
  CandidateSet c{Mat(n, w), Mat(n, w), Mat(n, 2 * w)};
  for (Eigen::Index j = 0; j < n; ++j) {
    c.questions.row(j) = encoder.encode(scene.qa_candidates[static_cast<std::size_t>(j)].question_text);
    c.answers.row(j) = encoder.encode(answer_oracle(scene, static_cast<std::size_t>(j)));
  }
  c.pairs << c.questions, c.answers;
  return c;
}

// ---------------------------------------------------------------------------
// Graph-level building blocks

inline Var decode_query_graph(Tape& tape, DialogParams& p, Var pooled_nodes, Var history) {
  return p.question_decoder(tape, ad::concat_cols(pooled_nodes, history));
}

/// Cosine similarity between the query and every (unit-norm) candidate row.
inline Var similarity_graph(Tape& tape, Var query, const Mat& cand_embs) {
  return ad::matmul(ad::normalize_rows(query), tape.constant(cand_embs.transpose()));
}

inline Var fuse_qa_graph(Tape& tape, DialogParams& p, Var qa_raw) { return p.qa_fusion(tape, qa_raw); }

/// HE output squashed by tanh so the N_R-step recurrence stays bounded.
inline Var encode_history_graph(Tape& tape, DialogParams& p, Var history, Var x_qa) {
  return ad::tanh(p.history_encoder(tape, ad::concat_cols(history, x_qa)));
}

/// Hard choice: highest similarity among allowed candidates, lowest index on ties.
inline std::size_t hard_argmax(const Mat& sims, const std::vector<bool>& allowed) {
  std::optional<std::size_t> best;
  for (std::size_t j = 0; j < allowed.size(); ++j) {
    if (!allowed[j]) continue;
    if (!best || sims(0, static_cast<Eigen::Index>(j)) > sims(0, static_cast<Eigen::Index>(*best))) best = j;
  }
  if (!best) throw Error("dialog", "every candidate is excluded");
  return *best;
}

/// Uniform choice over allowed candidates; a function of (seed, round) only.
inline std::size_t random_select(const std::vector<bool>& allowed, std::uint64_t seed, std::size_t round) {
  std::vector<std::size_t> open;
  for (std::size_t j = 0; j < allowed.size(); ++j)
    if (allowed[j]) open.push_back(j);
  if (open.empty()) throw Error("dialog", "every candidate is excluded");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + round + 1);
  std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
  return open[pick(rng)];
}

enum class Policy { kLearned, kRandom };

struct DialogGraph {
  std::vector<Var> qa;              // per-round fused QA embeddings (1 x d_h)
  Var history;                      // x_his after the last round
  std::vector<std::size_t> indices; // chosen (hard / argmax) candidate per round
  std::vector<Var> weights;         // per-round selection weights (learned policy only)
};

/// Records N_R rounds of select -> answer -> fuse -> history update on the tape.
inline DialogGraph run_dialog_graph(Tape& tape, DialogParams& p, const DialogConfig& cfg, Var node_features,
                                    const CandidateSet& cands, Policy policy, SelectionMode mode,
                                    std::uint64_t random_seed = 0) {
  cfg.validate();
  const std::size_t n = cands.size();
  if (cfg.no_repeat && n < cfg.rounds) throw Error("dialog", "fewer candidates than rounds");
  DialogGraph g;
  g.history = tape.constant(Mat::Zero(1, static_cast<Eigen::Index>(cfg.d_h)));
  Var pooled = ad::mean_rows(node_features);
  Var pair_bank = tape.constant(cands.pairs);
  std::vector<bool> allowed(n, true);
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    Var raw;
    std::size_t chosen = 0;
    if (policy == Policy::kRandom) {
      chosen = random_select(allowed, random_seed, round);
      raw = tape.constant(cands.pairs.row(static_cast<Eigen::Index>(chosen)));
    } else {
      Var query = decode_query_graph(tape, p, pooled, g.history);
      Var sims = similarity_graph(tape, query, cands.questions);
      chosen = hard_argmax(sims.value(), allowed);
      if (mode == SelectionMode::kHard) {
        raw = tape.constant(cands.pairs.row(static_cast<Eigen::Index>(chosen)));
      } else {
        Var w = ad::softmax_rows(ad::scale(sims, 1.0 / cfg.tau), allowed);
        g.weights.push_back(w);
        if (mode == SelectionMode::kStraightThrough) w = ad::straight_through(w, static_cast<Eigen::Index>(chosen));
        raw = ad::matmul(w, pair_bank);
      }
    }
    Var x_qa = fuse_qa_graph(tape, p, raw);
    g.history = encode_history_graph(tape, p, g.history, x_qa);
    g.qa.push_back(x_qa);
    g.indices.push_back(chosen);
    if (cfg.no_repeat) allowed[chosen] = false;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Value-level API

struct Selection {
  std::optional<std::size_t> index;  // hard mode
  RowVec weights;                    // soft mode
  RowVec query;
};

inline Selection select_question(const perception::PreliminaryObjectSet& objects, const DialogState& state,
                                 const Mat& cand_embs, DialogParams& params, const DialogConfig& cfg,
                                 SelectionMode mode) {
  Tape tape;
  Var pooled = ad::mean_rows(tape.constant(objects.node_features));
  Var query = decode_query_graph(tape, params, pooled, tape.constant(state.history));
  Var sims = similarity_graph(tape, query, cand_embs);
  const auto allowed = state.allowed(static_cast<std::size_t>(cand_embs.rows()), cfg.no_repeat);
  Selection s;
  s.query = query.value().row(0);
  if (mode == SelectionMode::kHard) {
    s.index = hard_argmax(sims.value(), allowed);
  } else {
    s.weights = ad::softmax_rows(ad::scale(sims, 1.0 / cfg.tau), allowed).value().row(0);
  }
  return s;
}

inline EncodedQA encode_qa_pair(const RowVec& x_q, const RowVec& x_a, DialogParams& params) {
  const auto dq = params.qa_fusion.in_features() / 2;
  if (x_q.size() != dq || x_a.size() != dq) throw Error("dialog", "question / answer embedding width mismatch");
  Tape tape;
  RowVec raw(2 * dq);
  raw << x_q, x_a;
  Var out = fuse_qa_graph(tape, params, tape.constant(raw));
  return EncodedQA{x_q, x_a, out.value().row(0)};
}

inline DialogState encode_history(const DialogState& state, std::size_t cand_index, const EncodedQA& qa,
                                  DialogParams& params) {
  const auto dh = params.history_encoder.second.out_features();
  if (state.history.size() != dh || qa.x_qa.size() != dh) throw Error("dialog", "history / QA width mismatch");
  Tape tape;
  Var h = encode_history_graph(tape, params, tape.constant(state.history), tape.constant(qa.x_qa));
  DialogState next = state;
  next.history = h.value().row(0);
  next.selected.emplace_back(cand_index, qa);
  ++next.round;
  return next;
}

/// Full dialog for one scene. In soft mode each round's QA embedding is the
/// weight-averaged candidate embedding and the argmax index is recorded.
inline DialogState run_dialog(const perception::PreliminaryObjectSet& objects, const core::SceneInstance& scene,
                              DialogParams& params, const DialogConfig& cfg, const TextEncoder& encoder,
                              SelectionMode mode = SelectionMode::kHard) {
  cfg.validate();
  if (scene.qa_candidates.size() != cfg.n_cand)
    throw Error("dialog", scene.scene_id + " is not pooled to n_cand candidates");
  const CandidateSet cands = encode_candidates(scene, encoder);
  DialogState state = DialogState::initial(cfg.d_h);
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    const Selection sel = select_question(objects, state, cands.questions, params, cfg, mode);
    std::size_t index;
    RowVec x_q, x_a;
    if (sel.index) {
      index = *sel.index;
      x_q = encoder.encode(scene.qa_candidates[index].question_text);
      x_a = encoder.encode(answer_oracle(scene, index));
    } else {
      index = core::argmax(std::vector<double>(sel.weights.data(), sel.weights.data() + sel.weights.size()));
      x_q = sel.weights * cands.questions;
      x_a = sel.weights * cands.answers;
    }
    state = encode_history(state, index, encode_qa_pair(x_q, x_a, params), params);
  }
  return state;
}

}  // namespace sidial::dialog
