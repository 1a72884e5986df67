#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Nodes hold their value
// and, after backward(), their gradient. Parameters are long-lived tensors that
// get registered on a tape per pass; backward() accumulates into Parameter::grad.
// Row-vector convention throughout: a batch of n feature vectors is an n x d matrix.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sidial/error.hpp"

namespace sidial::ad {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;

  Parameter() = default;
  Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
};

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, true, nullptr);
    nodes_[v.id()].param = &p;
    return v;
  }

  Var push(Mat value, bool requires_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(back), nullptr});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  void accumulate(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Back-propagates from a 1x1 node and adds parameter gradients into Parameter::grad.
  void backward(Var loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw Error("autodiff", "backward() needs a scalar loss");
    nodes_[loss.id()].grad = Mat::Ones(1, 1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(*this, id);
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward back;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }
inline const Mat& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape()->requires_grad(v.id())) return true;
  return false;
}

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("autodiff", "operands recorded on different tapes");
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) throw Error("autodiff", "matmul shape mismatch");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() * b.value(), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// Elementwise sum; `b` may also be a 1 x cols row broadcast over the rows of `a`.
inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  const int ia = a.id(), ib = b.id();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    return a.tape()->push(a.value() + b.value(), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
      t.accumulate(ia, t.grad(self));
      t.accumulate(ib, t.grad(self));
    });
  }
  if (b.rows() == 1 && a.cols() == b.cols()) {
    Mat out = a.value().rowwise() + b.value().row(0);
    return a.tape()->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
      t.accumulate(ia, t.grad(self));
      t.accumulate(ib, t.grad(self).colwise().sum());
    });
  }
  throw Error("autodiff", "add shape mismatch");
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("autodiff", "sub shape mismatch");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

/// Elementwise product; `b` may be a 1 x cols row broadcast over the rows of `a`.
inline Var hadamard(Var a, Var b) {
  detail::require_same_tape(a, b);
  const int ia = a.id(), ib = b.id();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    return a.tape()->push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
      const Mat& g = t.grad(self);
      if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
      if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
  }
  if (b.rows() == 1 && a.cols() == b.cols()) {
    Mat out = a.value().array().rowwise() * b.value().row(0).array();
    return a.tape()->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, int self) {
      const Mat& g = t.grad(self);
      const Mat& bv = t.value(ib);
      if (t.requires_grad(ia)) t.accumulate(ia, (g.array().rowwise() * bv.row(0).array()).matrix());
      if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)).colwise().sum());
    });
  }
  throw Error("autodiff", "hadamard shape mismatch");
}

inline Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape()->push(a.value() * s, detail::any_grad({a}),
                        [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

inline Var relu(Var a) {
  const int ia = a.id();
  return a.tape()->push(a.value().cwiseMax(0.0), detail::any_grad({a}), [ia](Tape& t, int self) {
    const Mat mask = (t.value(ia).array() > 0.0).cast<double>().matrix();
    t.accumulate(ia, t.grad(self).cwiseProduct(mask));
  });
}

inline Var tanh(Var a) {
  const int ia = a.id();
  Mat out = a.value().array().tanh().matrix();
  return a.tape()->push(out, detail::any_grad({a}), [ia, out](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

inline Var transpose(Var a) {
  const int ia = a.id();
  return a.tape()->push(a.value().transpose(), detail::any_grad({a}),
                        [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self).transpose()); });
}

inline Var concat_cols(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.rows() != b.rows()) throw Error("autodiff", "concat_cols row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape()->push(std::move(out), detail::any_grad({a, b}), [ia, ib, ca, cb](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.leftCols(ca));
    if (t.requires_grad(ib)) t.accumulate(ib, g.rightCols(cb));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("autodiff", "concat_rows of nothing");
  Tape* tape = parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool grad = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error("autodiff", "concat_rows column mismatch");
    rows += p.rows();
    grad = grad || tape->requires_grad(p.id());
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    layout.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return tape->push(std::move(out), grad, [layout](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Eigen::Index off = 0;
    for (const auto& [id, n] : layout) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(off, n));
      off += n;
    }
  });
}

inline Var gather_rows(Var a, std::vector<Eigen::Index> idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = a.value().row(idx[k]);
  const int ia = a.id();
  return a.tape()->push(std::move(out), detail::any_grad({a}), [ia, idx = std::move(idx)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (std::size_t k = 0; k < idx.size(); ++k) ga.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    t.accumulate(ia, ga);
  });
}

inline Var mean_rows(Var a) {
  const Eigen::Index n = a.rows();
  const int ia = a.id();
  return a.tape()->push(a.value().colwise().mean(), detail::any_grad({a}), [ia, n](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).replicate(n, 1) / static_cast<double>(n));
  });
}

inline Var sum(Var a) {
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), detail::any_grad({a}), [ia, r, c](Tape& t, int self) {
    t.accumulate(ia, Mat::Constant(r, c, t.grad(self)(0, 0)));
  });
}

/// Scales each row to unit L2 norm.
inline Var normalize_rows(Var a, double eps = 1e-12) {
  Mat norms = a.value().rowwise().norm().cwiseMax(eps);
  Mat out = a.value().array().colwise() / norms.col(0).array();
  const int ia = a.id();
  return a.tape()->push(out, detail::any_grad({a}), [ia, norms, out](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double proj = g.row(i).dot(out.row(i));
      ga.row(i) = (g.row(i) - proj * out.row(i)) / norms(i, 0);
    }
    t.accumulate(ia, ga);
  });
}

/// Row-wise softmax. Columns with mask[c] == false get probability exactly 0.
inline Var softmax_rows(Var a, const std::vector<bool>& mask = {}) {
  const Mat& x = a.value();
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != x.cols())
    throw Error("autodiff", "softmax mask width mismatch");
  Mat out = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (mask.empty() || mask[j]) mx = std::max(mx, x(i, j));
    if (!std::isfinite(mx)) throw Error("autodiff", "softmax over an empty support");
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (mask.empty() || mask[j]) {
        out(i, j) = std::exp(x(i, j) - mx);
        z += out(i, j);
      }
    out.row(i) /= z;
  }
  const int ia = a.id();
  return a.tape()->push(out, detail::any_grad({a}), [ia, out](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double dot = g.row(i).dot(out.row(i));
      ga.row(i) = out.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    t.accumulate(ia, ga);
  });
}

/// Mean over rows of -sum_k target(i,k) * log softmax(logits)(i,k). Targets are constant.
inline Var soft_cross_entropy(Var logits, const Mat& targets) {
  const Mat& x = logits.value();
  if (x.rows() != targets.rows() || x.cols() != targets.cols())
    throw Error("autodiff", "cross-entropy target shape mismatch");
  Mat probs(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    probs.row(i) = (x.row(i).array() - lse).exp().matrix();
    for (Eigen::Index k = 0; k < x.cols(); ++k)
      if (targets(i, k) != 0.0) loss -= targets(i, k) * (x(i, k) - lse);
  }
  const double n = static_cast<double>(x.rows());
  Mat out(1, 1);
  out(0, 0) = loss / n;
  const int ia = logits.id();
  return logits.tape()->push(std::move(out), detail::any_grad({logits}), [ia, probs, targets, n](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    Mat rowsum = targets.rowwise().sum();
    Mat ga = probs.array().colwise() * rowsum.col(0).array();
    t.accumulate(ia, (ga - targets) * (g / n));
  });
}

/// Forward value is the one-hot row at `index`; backward passes the gradient to `weights` unchanged.
inline Var straight_through(Var weights, Eigen::Index index) {
  if (weights.rows() != 1 || index < 0 || index >= weights.cols())
    throw Error("autodiff", "straight_through expects a 1 x N weight row and a valid index");
  Mat onehot = Mat::Zero(1, weights.cols());
  onehot(0, index) = 1.0;
  const int iw = weights.id();
  return weights.tape()->push(std::move(onehot), detail::any_grad({weights}),
                              [iw](Tape& t, int self) { t.accumulate(iw, t.grad(self)); });
}

/// Rescales all grads so their joint L2 norm is at most `max_norm`; returns the norm before.
inline double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm)
    for (Parameter* p : params) p->grad *= max_norm / norm;
  return norm;
}

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update from the accumulated grads (divided by `batch`) and zeroes them.
  void step(const std::vector<Parameter*>& params, double batch = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->adam_m.size() == 0) {
        p->adam_m = Mat::Zero(p->value.rows(), p->value.cols());
        p->adam_v = Mat::Zero(p->value.rows(), p->value.cols());
      }
      const Mat g = p->grad / batch;
      p->adam_m = cfg_.beta1 * p->adam_m + (1.0 - cfg_.beta1) * g;
      p->adam_v = cfg_.beta2 * p->adam_v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p->value.array() -= cfg_.learning_rate * (p->adam_m.array() / c1) /
                          ((p->adam_v.array() / c2).sqrt() + cfg_.eps);
      p->zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

/// Dense affine map x W + b.
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, bool with_bias = true,
         double gain = 1.0)
      : weight(name + ".weight", random_matrix(in, out, gain / std::sqrt(static_cast<double>(in)), rng)),
        bias(name + ".bias", Mat::Zero(1, out)),
        has_bias(with_bias) {}

  Var operator()(Tape& tape, Var x) {
    Var y = matmul(x, tape.param(weight));
    return has_bias ? add(y, tape.param(bias)) : y;
  }

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
};

/// Two feature-mixing layers with a ReLU between them plus a linear skip path:
///   y = W2 relu(W1 x + b1) + b2 + S x
struct ResidualMixer {
  Linear first;
  Linear second;
  Linear skip;

  ResidualMixer() = default;
  ResidualMixer(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng)
      : first(name + ".mix1", in, hidden, rng),
        second(name + ".mix2", hidden, out, rng),
        skip(name + ".skip", in, out, rng, false) {}

  Var operator()(Tape& tape, Var x) { return add(second(tape, relu(first(tape, x))), skip(tape, x)); }

  void collect(std::vector<Parameter*>& out) {
    first.collect(out);
    second.collect(out);
    skip.collect(out);
  }
};

}  // namespace sidial::ad
