#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "snaptraj/error.hpp"

namespace snaptraj::ad {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Dynamically built reverse-mode tape over dense matrices.  Every operation
/// appends a node holding the forward value plus a closure that scatters the
/// node's adjoint into its parents.  Nodes are created in topological order,
/// so the backward sweep is a single reverse walk over the tape.
template <typename Scalar>
class Graph {
public:
  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> adjoint;
    std::function<void(Graph&)> backward;
    bool needs_grad = false;
  };

  int add_node(Mat<Scalar> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(Graph&)> fn) {
    nodes_[id].backward = std::move(fn);
  }

  const Mat<Scalar>& value(int id) const { return nodes_[id].value; }
  const Mat<Scalar>& adjoint(int id) const { return nodes_[id].adjoint; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  void accumulate(int id, const Mat<Scalar>& g) {
    if (nodes_[id].needs_grad) nodes_[id].adjoint += g;
  }

  /// Backward sweep from a 1x1 root node.
  void backward(int root) {
    if (value(root).size() != 1)
      raise(ErrorCode::BadInput, "backward root must be a scalar node");
    for (auto& n : nodes_) n.adjoint.setZero(n.value.rows(), n.value.cols());
    nodes_[root].adjoint(0, 0) = Scalar(1);
    for (int id = root; id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.backward) n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

private:
  std::vector<Node> nodes_;
};

/// Handle to a tape node; cheap to copy, valid while the graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const { return graph->value(id); }
  const Mat<Scalar>& grad() const { return graph->adjoint(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
Var<Scalar> constant(Graph<Scalar>& g, Mat<Scalar> value) {
  return {&g, g.add_node(std::move(value), false)};
}

/// Leaf with gradient tracking (model parameters, probed inputs).
template <typename Scalar>
Var<Scalar> leaf(Graph<Scalar>& g, Mat<Scalar> value) {
  return {&g, g.add_node(std::move(value), true)};
}

namespace detail {
template <typename Scalar>
void check_same_shape(const Var<Scalar>& a, const Var<Scalar>& b,
                      const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    raise(ErrorCode::DimensionMismatch, std::string(op) + ": shape mismatch");
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_shape(a, b, "add");
  Graph<Scalar>& g = *a.graph;
  const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  const int out = g.add_node(a.value() + b.value(), ng);
  if (ng)
    g.set_backward(out, [a = a.id, b = b.id, out](Graph<Scalar>& g) {
      g.accumulate(a, g.adjoint(out));
      g.accumulate(b, g.adjoint(out));
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_shape(a, b, "sub");
  Graph<Scalar>& g = *a.graph;
  const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  const int out = g.add_node(a.value() - b.value(), ng);
  if (ng)
    g.set_backward(out, [a = a.id, b = b.id, out](Graph<Scalar>& g) {
      g.accumulate(a, g.adjoint(out));
      g.accumulate(b, -g.adjoint(out));
    });
  return {&g, out};
}

/// Broadcast-add a 1 x C row vector to every row.
template <typename Scalar>
Var<Scalar> add_rowvec(Var<Scalar> a, Var<Scalar> bias) {
  Graph<Scalar>& g = *a.graph;
  if (bias.rows() != 1 || bias.cols() != a.cols())
    raise(ErrorCode::DimensionMismatch, "add_rowvec: bias must be 1 x cols(a)");
  Mat<Scalar> v = a.value().rowwise() + bias.value().row(0);
  const bool ng = g.needs_grad(a.id) || g.needs_grad(bias.id);
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [a = a.id, b = bias.id, out](Graph<Scalar>& g) {
      g.accumulate(a, g.adjoint(out));
      if (g.needs_grad(b))
        g.accumulate(b, g.adjoint(out).colwise().sum());
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Graph<Scalar>& g = *a.graph;
  if (a.cols() != b.rows())
    raise(ErrorCode::DimensionMismatch, "matmul: inner dimensions differ");
  const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  const int out = g.add_node(a.value() * b.value(), ng);
  if (ng)
    g.set_backward(out, [a = a.id, b = b.id, out](Graph<Scalar>& g) {
      if (g.needs_grad(a))
        g.accumulate(a, g.adjoint(out) * g.value(b).transpose());
      if (g.needs_grad(b))
        g.accumulate(b, g.value(a).transpose() * g.adjoint(out));
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(a.value().transpose(), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      g.accumulate(a, g.adjoint(out).transpose());
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Graph<Scalar>& g = *a.graph;
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(a.value() * s, ng);
  if (ng)
    g.set_backward(out, [a = a.id, s, out](Graph<Scalar>& g) {
      g.accumulate(a, g.adjoint(out) * s);
    });
  return {&g, out};
}

/// Row-wise softmax with an optional additive mask (0 to pass, -inf to
/// block).  Each output row is a probability distribution.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a, const Mat<Scalar>* mask = nullptr) {
  Graph<Scalar>& g = *a.graph;
  Mat<Scalar> logits = a.value();
  if (mask) {
    if (mask->rows() != logits.rows() || mask->cols() != logits.cols())
      raise(ErrorCode::DimensionMismatch, "softmax mask shape mismatch");
    logits += *mask;
  }
  Mat<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(std::move(p), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      const Mat<Scalar>& p = g.value(out);
      const Mat<Scalar>& dy = g.adjoint(out);
      Mat<Scalar> dx(p.rows(), p.cols());
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const Scalar dot = p.row(i).dot(dy.row(i));
        dx.row(i) =
            p.row(i).array() * (dy.row(i).array() - dot);
      }
      g.accumulate(a, dx);
    });
  return {&g, out};
}

/// Per-row layer normalisation with learned gain/bias (both 1 x C).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                       Scalar eps = Scalar(1e-5)) {
  Graph<Scalar>& g = *x.graph;
  const Eigen::Index rows = x.rows(), cols = x.cols();
  if (gain.rows() != 1 || gain.cols() != cols || bias.rows() != 1 ||
      bias.cols() != cols)
    raise(ErrorCode::DimensionMismatch, "layer_norm: gain/bias must be 1 x C");

  Mat<Scalar> xhat(rows, cols);
  Mat<Scalar> inv_sigma(rows, 1);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Scalar mu = x.value().row(i).mean();
    const Scalar var = (x.value().row(i).array() - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_sigma(i, 0) = is;
    xhat.row(i) = (x.value().row(i).array() - mu) * is;
  }
  Mat<Scalar> y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    y.row(i) = xhat.row(i).cwiseProduct(gain.value().row(0)) +
               bias.value().row(0);

  const bool ng = g.needs_grad(x.id) || g.needs_grad(gain.id) ||
                  g.needs_grad(bias.id);
  const int out = g.add_node(std::move(y), ng);
  if (ng)
    g.set_backward(out, [x = x.id, ga = gain.id, bi = bias.id, out, xhat,
                         inv_sigma](Graph<Scalar>& g) {
      const Mat<Scalar>& dy = g.adjoint(out);
      const Eigen::Index rows = dy.rows(), cols = dy.cols();
      if (g.needs_grad(ga))
        g.accumulate(ga, (dy.array() * xhat.array()).colwise().sum().matrix());
      if (g.needs_grad(bi)) g.accumulate(bi, dy.colwise().sum());
      if (g.needs_grad(x)) {
        Mat<Scalar> dx(rows, cols);
        const auto gain_row = g.value(ga).row(0);
        for (Eigen::Index i = 0; i < rows; ++i) {
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dxhat =
              dy.row(i).cwiseProduct(gain_row);
          const Scalar mean_dxhat = dxhat.mean();
          const Scalar mean_dxhat_xhat = dxhat.dot(xhat.row(i)) / cols;
          dx.row(i) = inv_sigma(i, 0) *
                      (dxhat.array() - mean_dxhat -
                       xhat.row(i).array() * mean_dxhat_xhat);
        }
        g.accumulate(x, dx);
      }
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(a.value().cwiseMax(Scalar(0)), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      Mat<Scalar> dx = ((g.value(a).array() > Scalar(0)).template cast<Scalar>() *
                        g.adjoint(out).array())
                           .matrix();
      g.accumulate(a, dx);
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Mat<Scalar> v = a.value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const Scalar x = v.data()[i];
    v.data()[i] = Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  }
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
      const Scalar inv_sqrt2pi =
          Scalar(1) / std::sqrt(Scalar(2) * Scalar(std::numbers::pi));
      Mat<Scalar> dx = g.value(a);
      const Mat<Scalar>& dy = g.adjoint(out);
      for (Eigen::Index i = 0; i < dx.size(); ++i) {
        const Scalar x = dx.data()[i];
        const Scalar cdf =
            Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
        const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * x * x);
        dx.data()[i] = dy.data()[i] * (cdf + x * pdf);
      }
      g.accumulate(a, dx);
    });
  return {&g, out};
}

/// Column slice [start, start + count).
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, int start, int count) {
  Graph<Scalar>& g = *a.graph;
  if (start < 0 || count < 1 || start + count > a.cols())
    raise(ErrorCode::OutOfRange, "slice_cols: range outside matrix");
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(a.value().middleCols(start, count), ng);
  if (ng)
    g.set_backward(out, [a = a.id, start, count, out](Graph<Scalar>& g) {
      Mat<Scalar> dx = Mat<Scalar>::Zero(g.value(a).rows(), g.value(a).cols());
      dx.middleCols(start, count) = g.adjoint(out);
      g.accumulate(a, dx);
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) raise(ErrorCode::BadInput, "concat_cols: empty list");
  Graph<Scalar>& g = *parts.front().graph;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      raise(ErrorCode::DimensionMismatch, "concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || g.needs_grad(p.id);
  }
  Mat<Scalar> v(rows, cols);
  Eigen::Index at = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id);
    widths.push_back(p.cols());
    at += p.cols();
  }
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [ids, widths, out](Graph<Scalar>& g) {
      Eigen::Index at = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        g.accumulate(ids[i], g.adjoint(out).middleCols(at, widths[i]));
        at += widths[i];
      }
    });
  return {&g, out};
}

/// Sum of absolute values, as a 1x1 node.  Subgradient at zero is zero.
template <typename Scalar>
Var<Scalar> abs_sum(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  Mat<Scalar> v(1, 1);
  v(0, 0) = a.value().array().abs().sum();
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      const Scalar w = g.adjoint(out)(0, 0);
      g.accumulate(a, (g.value(a).array().sign() * w).matrix());
    });
  return {&g, out};
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  Mat<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      g.accumulate(a, Mat<Scalar>::Constant(g.value(a).rows(),
                                            g.value(a).cols(),
                                            g.adjoint(out)(0, 0)));
    });
  return {&g, out};
}

/// Prefix sums down each column (used by the cumulative loss variant).
template <typename Scalar>
Var<Scalar> cumsum_rows(Var<Scalar> a) {
  Graph<Scalar>& g = *a.graph;
  Mat<Scalar> v = a.value();
  for (Eigen::Index i = 1; i < v.rows(); ++i) v.row(i) += v.row(i - 1);
  const bool ng = g.needs_grad(a.id);
  const int out = g.add_node(std::move(v), ng);
  if (ng)
    g.set_backward(out, [a = a.id, out](Graph<Scalar>& g) {
      Mat<Scalar> dx = g.adjoint(out);
      for (Eigen::Index i = dx.rows() - 2; i >= 0; --i)
        dx.row(i) += dx.row(i + 1);
      g.accumulate(a, dx);
    });
  return {&g, out};
}

}  // namespace snaptraj::ad
