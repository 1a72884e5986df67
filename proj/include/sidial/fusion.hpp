#pragma once

// Vision update: node and edge features attend over the dialog memory and
// receive a gated residual update, O' = {V', E'} -> O = {V, E}.

#include <cmath>
#include <random>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/dialog.hpp"
#include "sidial/perception.hpp"

namespace sidial::fusion {

using ad::Mat;
using ad::Tape;
using ad::Var;

struct FusionConfig {
  std::size_t d_k = 16;
};

struct FusionParams {
  ad::Linear node_query;  // d -> d_k
  ad::Linear edge_query;  // d -> d_k
  ad::Linear key;         // d_h -> d_k
  ad::Linear value;       // d_h -> d
  ad::Parameter node_gate;
  ad::Parameter edge_gate;

  FusionParams() = default;
  FusionParams(Eigen::Index d, Eigen::Index d_h, const FusionConfig& cfg, std::mt19937_64& rng) {
    const auto dk = static_cast<Eigen::Index>(cfg.d_k);
    if (dk <= 0) throw Error("config", "fusion d_k must be positive");
    node_query = ad::Linear("fusion.node_query", d, dk, rng);
    edge_query = ad::Linear("fusion.edge_query", d, dk, rng);
    key = ad::Linear("fusion.key", d_h, dk, rng);
    value = ad::Linear("fusion.value", d_h, d, rng);
    node_gate = ad::Parameter("fusion.node_gate", Mat::Ones(1, d));
    edge_gate = ad::Parameter("fusion.edge_gate", Mat::Ones(1, d));
  }

  Eigen::Index d_k() const { return key.out_features(); }

  /// Zero value projection and gates: the update becomes the identity.
  void zero_update() {
    value.weight.value.setZero();
    value.bias.value.setZero();
    node_gate.value.setZero();
    edge_gate.value.setZero();
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    node_query.collect(out);
    edge_query.collect(out);
    key.collect(out);
    value.collect(out);
    out.push_back(&node_gate);
    out.push_back(&edge_gate);
    return out;
  }
};

struct AttentionResult {
  Var attended;  // m x d
  Var weights;   // m x slots
};

/// softmax(Q K^T / sqrt(d_k)) V, one softmax per query row.
inline AttentionResult attention_graph(Var queries, Var keys, Var values) {
  const double s = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  Var w = ad::softmax_rows(ad::scale(ad::matmul(queries, ad::transpose(keys)), s));
  return {ad::matmul(w, values), w};
}

inline Mat attention(const Mat& queries, const Mat& keys, const Mat& values) {
  if (keys.rows() < 1) throw Error("fusion", "attention needs at least one memory slot");
  Tape tape;
  return attention_graph(tape.constant(queries), tape.constant(keys), tape.constant(values)).attended.value();
}

struct UpdateGraph {
  Var nodes;
  Var edges;
  Var node_weights;
  Var edge_weights;
};

/// `memory` holds one row per dialog slot (per-round QA embeddings, then the final history).
inline UpdateGraph update_vision_graph(Tape& tape, FusionParams& p, Var nodes, Var edges, Var memory) {
  Var keys = p.key(tape, memory);
  Var values = p.value(tape, memory);
  AttentionResult n = attention_graph(p.node_query(tape, nodes), keys, values);
  UpdateGraph out;
  out.nodes = ad::add(nodes, ad::hadamard(n.attended, tape.param(p.node_gate)));
  out.node_weights = n.weights;
  if (edges.rows() > 0) {
    AttentionResult e = attention_graph(p.edge_query(tape, edges), keys, values);
    out.edges = ad::add(edges, ad::hadamard(e.attended, tape.param(p.edge_gate)));
    out.edge_weights = e.weights;
  } else {
    out.edges = edges;
    out.edge_weights = tape.constant(Mat(0, memory.rows()));
  }
  return out;
}

inline Var memory_graph(const std::vector<Var>& qa, Var history) {
  std::vector<Var> rows = qa;
  rows.push_back(history);
  return ad::concat_rows(rows);
}

/// Memory rows of a finished dialog: every selected x_qa followed by the final history.
inline Mat dialog_memory(const dialog::DialogState& state) {
  Mat m(static_cast<Eigen::Index>(state.selected.size()) + 1, state.history.size());
  for (std::size_t r = 0; r < state.selected.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = state.selected[r].second.x_qa;
  m.row(m.rows() - 1) = state.history;
  return m;
}

/// Returns O with updated node and edge features; boxes, pairs and logits are carried over.
inline perception::PreliminaryObjectSet update_vision(const perception::PreliminaryObjectSet& objects,
                                                      const dialog::DialogState& state, FusionParams& params,
                                                      std::size_t rounds) {
  if (state.round != rounds)
    throw Error("fusion", "dialog incomplete: round " + std::to_string(state.round) + " of " + std::to_string(rounds));
  Tape tape;
  UpdateGraph g = update_vision_graph(tape, params, tape.constant(objects.node_features),
                                      tape.constant(objects.edge_features), tape.constant(dialog_memory(state)));
  perception::PreliminaryObjectSet out = objects;
  out.node_features = g.nodes.value();
  out.edge_features = g.edges.value();
  return out;
}

}  // namespace sidial::fusion
