// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the output value plus a closure that pushes the node's gradient to
// its inputs; Tape::backward walks the nodes in reverse creation order, which
// is a valid topological order by construction.
#pragma once

#include <cmath>
#include <functional>
#include <algorithm>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "violet/error.hpp"

namespace violet {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named parameter tensors, ordered by path so iteration is deterministic.
class ParamStore {
 public:
  void set(const std::string& path, Matrix value) { params_[path] = std::move(value); }
  bool contains(const std::string& path) const { return params_.count(path) > 0; }
  const Matrix& at(const std::string& path) const {
    auto it = params_.find(path);
    require(it != params_.end(), ErrorCode::kInvalidArgument, "unknown parameter " + path);
    return it->second;
  }
  Matrix& at(const std::string& path) {
    auto it = params_.find(path);
    require(it != params_.end(), ErrorCode::kInvalidArgument, "unknown parameter " + path);
    return it->second;
  }
  void erase(const std::string& path) { params_.erase(path); }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, m] : params_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, m] : params_)
      if (!m.allFinite()) return false;
    return true;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    auto ib = b.params_.begin();
    for (const auto& [path, m] : a.params_) {
      if (path != ib->first || m.rows() != ib->second.rows() || m.cols() != ib->second.cols() ||
          !(m.array() == ib->second.array()).all())
        return false;
      ++ib;
    }
    return true;
  }

 private:
  std::map<std::string, Matrix> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter path. Repeated lookups of the same path share
  /// one node so gradients from every use accumulate.
  Var param(const ParamStore& store, const std::string& path) {
    auto it = param_nodes_.find(path);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = push(store.at(path), !frozen(path), nullptr);
    param_nodes_[path] = v.id;
    return v;
  }

  /// Parameters whose path starts with any of these prefixes get no gradient.
  void freeze_prefixes(std::vector<std::string> prefixes) { frozen_ = std::move(prefixes); }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  Matrix& mutable_value(Var v) { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  /// Gradient accumulator for `v`, zero-initialised on first touch.
  Matrix& acc(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of the last backward() root w.r.t. `v`; zeros if untouched.
  Matrix grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root) {
    require(root.tape == this, ErrorCode::kInvalidArgument, "root belongs to another tape");
    require(value(root).size() == 1, ErrorCode::kInvalidArgument, "backward root must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!needs_grad(root)) return;
    acc(root)(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradients of every parameter touched by this tape, keyed by path.
  ParamStore param_grads() const {
    ParamStore out;
    for (const auto& [path, id] : param_nodes_) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      out.set(path, n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols()));
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool frozen(const std::string& path) const {
    for (const auto& p : frozen_)
      if (path.compare(0, p.size(), p) == 0) return true;
    return false;
  }

  Var push(Matrix value, bool needs, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs, std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  std::vector<std::string> frozen_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Ops

inline Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kInvalidArgument,
          "add: shape mismatch");
  Tape& t = *a.tape;
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.acc(a) += g;
    if (t.needs_grad(b)) t.acc(b) += g;
  });
}

inline Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kInvalidArgument,
          "sub: shape mismatch");
  Tape& t = *a.tape;
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.acc(a) += g;
    if (t.needs_grad(b)) t.acc(b) -= g;
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.acc(a) += g * s; });
}

/// a (n x m) plus a broadcast row (1 x m).
inline Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::kInvalidArgument,
          "add_row: shape mismatch");
  Tape& t = *a.tape;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.acc(a) += g;
    if (t.needs_grad(row)) t.acc(row) += g.colwise().sum();
  });
}

inline Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), ErrorCode::kInvalidArgument, "matmul: inner dimension mismatch");
  Tape& t = *a.tape;
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.acc(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.acc(b).noalias() += t.value(a).transpose() * g;
  });
}

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var gelu(Var a) {
  Tape& t = *a.tape;
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Matrix d = t.value(a).unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    });
    t.acc(a).array() += g.array() * d.array();
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Matrix out = a.value().array().tanh().matrix();
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    t.acc(a).array() += g.array() * (1.0 - y.array().square());
  });
}

/// Row-wise layer normalisation with learned gain and bias (each 1 x d).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  require(gain.cols() == d && bias.cols() == d, ErrorCode::kInvalidArgument,
          "layer_norm: parameter width mismatch");
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = xv.row(i).mean();
    const double var = (xv.row(i).array() - mean).square().mean();
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (xv.row(i).array() - mean) * (*inv_std)(i);
  }
  Matrix out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat, inv_std](Tape& t, const Matrix& g) {
                    if (t.needs_grad(gain))
                      t.acc(gain) += (g.array() * xhat->array()).colwise().sum().matrix();
                    if (t.needs_grad(bias)) t.acc(bias) += g.colwise().sum();
                    if (!t.needs_grad(x)) return;
                    Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
                    Matrix& dx = t.acc(x);
                    for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                      const double m1 = dxhat.row(i).mean();
                      const double m2 = (dxhat.row(i).array() * xhat->row(i).array()).mean();
                      dx.row(i).array() += (*inv_std)(i) * (dxhat.row(i).array() - m1 -
                                                            xhat->row(i).array() * m2);
                    }
                  });
}

inline Var gather_rows(Var x, std::vector<int> rows) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < xv.rows(), ErrorCode::kInvalidArgument,
            "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
  }
  return t.record(std::move(out), {x}, [x, rows = std::move(rows)](Tape& t, const Matrix& g) {
    Matrix& dx = t.acc(x);
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

inline Var slice_rows(Var x, int begin, int count) {
  std::vector<int> rows(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) rows[static_cast<std::size_t>(i)] = begin + i;
  return gather_rows(x, std::move(rows));
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, ErrorCode::kInvalidArgument, "concat_rows: width mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index r = 0;
    for (const Var& p : parts) {
      const Eigen::Index n = t.value(p).rows();
      if (t.needs_grad(p)) t.acc(p) += g.middleRows(r, n);
      r += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, ErrorCode::kInvalidArgument, "concat_cols: height mismatch");
    total += p.cols();
  }
  Matrix out(rows, total);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (const Var& p : parts) {
      const Eigen::Index n = t.value(p).cols();
      if (t.needs_grad(p)) t.acc(p) += g.middleCols(c, n);
      c += n;
    }
  });
}

/// Rows flagged in `mask` are replaced by the broadcast row `fill` (1 x d).
/// Replaced rows pass no gradient back to `x`.
inline Var replace_rows(Var x, const std::vector<bool>& mask, Var fill) {
  require(static_cast<Eigen::Index>(mask.size()) == x.rows(), ErrorCode::kInvalidArgument,
          "replace_rows: mask length mismatch");
  require(fill.rows() == 1 && fill.cols() == x.cols(), ErrorCode::kInvalidArgument,
          "replace_rows: fill shape mismatch");
  Tape& t = *x.tape;
  Matrix out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.row(static_cast<Eigen::Index>(i)) = fill.value().row(0);
  return t.record(std::move(out), {x, fill}, [x, fill, mask](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (mask[i]) {
        if (t.needs_grad(fill)) t.acc(fill).row(0) += g.row(r);
      } else if (t.needs_grad(x)) {
        t.acc(x).row(r) += g.row(r);
      }
    }
  });
}

/// Multi-head scaled dot-product attention over already-projected q, k, v.
/// `allowed(i, j)` false blocks query i from key j. Per-head probabilities are
/// written to `probs_out` when given.
inline Var attention(Var q, Var k, Var v, int heads, const BoolMatrix* allowed = nullptr,
                     std::vector<Matrix>* probs_out = nullptr) {
  const Eigen::Index n = q.rows(), m = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == m, ErrorCode::kInvalidArgument,
          "attention: q/k/v shape mismatch");
  require(heads > 0 && d % heads == 0, ErrorCode::kInvalidArgument,
          "attention: width not divisible by heads");
  if (allowed)
    require(allowed->rows() == n && allowed->cols() == m, ErrorCode::kInvalidArgument,
            "attention: mask shape mismatch");
  Tape& t = *q.tape;
  const Eigen::Index dk = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(heads));
  Matrix out(n, d);
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (q.value().middleCols(h * dk, dk) * k.value().middleCols(h * dk, dk).transpose()) * s;
    Matrix& p = (*probs)[static_cast<std::size_t>(h)];
    p.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j)
        if (!allowed || (*allowed)(i, j)) mx = std::max(mx, scores(i, j));
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double e = (!allowed || (*allowed)(i, j)) ? std::exp(scores(i, j) - mx) : 0.0;
        p(i, j) = e;
        z += e;
      }
      p.row(i) /= z;
    }
    out.middleCols(h * dk, dk).noalias() = p * v.value().middleCols(h * dk, dk);
  }
  if (probs_out) *probs_out = *probs;
  return t.record(std::move(out), {q, k, v}, [q, k, v, heads, dk, s, probs](Tape& t, const Matrix& g) {
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto gh = g.middleCols(h * dk, dk);
      if (t.needs_grad(v)) t.acc(v).middleCols(h * dk, dk).noalias() += p.transpose() * gh;
      Matrix dp = gh * vv.middleCols(h * dk, dk).transpose();
      Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * s;
      if (t.needs_grad(q)) t.acc(q).middleCols(h * dk, dk).noalias() += ds * kv.middleCols(h * dk, dk);
      if (t.needs_grad(k))
        t.acc(k).middleCols(h * dk, dk).noalias() += ds.transpose() * qv.middleCols(h * dk, dk);
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar losses (each returns a 1 x 1 node)

/// Mean absolute error over every coordinate.
inline Var l1_loss(Var pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(),
          ErrorCode::kInvalidArgument, "l1_loss: shape mismatch");
  Tape& t = *pred.tape;
  const double count = static_cast<double>(std::max<Eigen::Index>(target.size(), 1));
  Matrix out(1, 1);
  out(0, 0) = (pred.value() - target).array().abs().sum() / count;
  return t.record(std::move(out), {pred}, [pred, target, count](Tape& t, const Matrix& g) {
    const Matrix diff = t.value(pred) - target;
    t.acc(pred).array() += g(0, 0) / count * diff.array().sign();
  });
}

/// Mean squared error over every coordinate.
inline Var l2_loss(Var pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(),
          ErrorCode::kInvalidArgument, "l2_loss: shape mismatch");
  Tape& t = *pred.tape;
  const double count = static_cast<double>(std::max<Eigen::Index>(target.size(), 1));
  Matrix out(1, 1);
  out(0, 0) = (pred.value() - target).array().square().sum() / count;
  return t.record(std::move(out), {pred}, [pred, target, count](Tape& t, const Matrix& g) {
    t.acc(pred).array() += g(0, 0) * 2.0 / count * (t.value(pred) - target).array();
  });
}

inline Eigen::VectorXd row_logsumexp(const Matrix& logits) {
  Eigen::VectorXd out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out(i) = mx + std::log((logits.row(i).array() - mx).exp().sum());
  }
  return out;
}

/// Mean over rows of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::vector<int> labels) {
  const Matrix& lv = logits.value();
  require(static_cast<Eigen::Index>(labels.size()) == lv.rows(), ErrorCode::kInvalidArgument,
          "cross_entropy: label count mismatch");
  for (int y : labels)
    require(y >= 0 && y < lv.cols(), ErrorCode::kInvalidArgument,
            "cross_entropy: label " + std::to_string(y) + " out of range");
  Tape& t = *logits.tape;
  const double count = static_cast<double>(std::max<std::size_t>(labels.size(), 1));
  const Eigen::VectorXd lse = row_logsumexp(lv);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    total += lse(static_cast<Eigen::Index>(i)) - lv(static_cast<Eigen::Index>(i), labels[i]);
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return t.record(std::move(out), {logits},
                  [logits, labels = std::move(labels), lse, count](Tape& t, const Matrix& g) {
                    const Matrix& lv = t.value(logits);
                    Matrix& dl = t.acc(logits);
                    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
                      Eigen::RowVectorXd p = (lv.row(i).array() - lse(i)).exp();
                      p(labels[static_cast<std::size_t>(i)]) -= 1.0;
                      dl.row(i) += g(0, 0) / count * p;
                    }
                  });
}

/// Sum of 1 x 1 nodes.
inline Var sum_scalars(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "sum_scalars: no inputs");
  Tape& t = *parts.front().tape;
  Matrix out = Matrix::Zero(1, 1);
  for (const Var& p : parts) {
    require(p.value().size() == 1, ErrorCode::kInvalidArgument, "sum_scalars: non-scalar input");
    out(0, 0) += p.scalar();
  }
  return t.record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    for (const Var& p : parts)
      if (t.needs_grad(p)) t.acc(p) += g;
  });
}

}  // namespace violet
