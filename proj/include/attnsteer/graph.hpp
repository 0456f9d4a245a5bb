#pragma once

#include <functional>
#include <utility>

#include "attnsteer/tensor.hpp"

namespace attnsteer {

// Reverse-mode tape. A Graph is built once per forward pass, consumed by a
// single backward() call and then discarded. Nodes are appended in execution
// order, so the tape is topologically sorted by construction and backward()
// is one reverse sweep that visits each node exactly once.
//
// Leaves wrap tensors owned by the caller; their accumulated gradients are
// flushed into the external tensor's `grad` buffer during the sweep.
// Constants never receive gradients.
class Graph;

struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<int>& shape() const;
};

class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor* external = nullptr;  // leaf binding, nullptr otherwise
    std::vector<double> grad;    // lazily allocated, zero-initialized
    std::function<void(Graph&, const Node&)> backfn;  // empty for leaves/constants
    bool needs_grad = false;
  };

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Wrap a caller-owned tensor. Gradients accumulate into `t.grad` when
  /// `t.requires_grad` is set. The value is snapshotted; later mutation of
  /// `t.data` does not affect this graph.
  Var leaf(Tensor& t) {
    Node n;
    n.value = t;
    n.value.grad.clear();
    n.external = &t;
    n.needs_grad = t.requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    n.value.requires_grad = false;
    n.value.grad.clear();
    return push(std::move(n));
  }

  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  Var emit(Tensor value, bool needs_grad,
           std::function<void(Graph&, const Node&)> backfn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backfn = std::move(backfn);
    return push(std::move(n));
  }

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated to zeros on first touch.
  std::vector<double>& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), 0.0);
    return n.grad;
  }

  /// Add `contribution` into node `id`'s gradient if it participates in
  /// differentiation. Used by op backward closures.
  void accumulate(int id, const std::vector<double>& contribution) {
    if (!needs_grad(id)) return;
    std::vector<double>& g = grad_buf(id);
    for (size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
  }

  /// Reverse sweep from a scalar loss. Every reachable differentiable node
  /// ends up with its gradient; leaf gradients are flushed into the external
  /// tensors. A graph can only be swept once.
  void backward(Var loss) {
    require(loss.graph == this, "backward: loss belongs to a different graph");
    if (consumed_)
      throw std::logic_error("backward: graph already consumed; rebuild the tape");
    const Node& ln = node(loss.id);
    if (ln.value.numel() != 1)
      throw std::logic_error("backward: loss must be scalar, got shape " +
                             ln.value.shape_str());
    if (!ln.needs_grad)
      throw std::logic_error("backward: loss does not depend on any differentiable input");
    grad_buf(loss.id)[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backfn) {
        n.backfn(*this, n);
      } else if (n.external != nullptr && n.external->requires_grad) {
        n.external->ensure_grad();
        for (size_t k = 0; k < n.grad.size(); ++k) n.external->grad[k] += n.grad[k];
      }
    }
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline const std::vector<int>& Var::shape() const { return graph->value(id).shape; }

namespace detail {

inline void check_same_graph(Var a, Var b, const char* op) {
  require(a.valid() && b.valid() && a.graph == b.graph,
          std::string(op) + ": operands from different graphs");
}

inline void check_same_shape(Var a, Var b, const char* op) {
  require(a.value().same_shape(b.value()),
          std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
              b.value().shape_str());
}

}  // namespace detail

// --- elementwise -------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::check_same_graph(a, b, "add");
  detail::check_same_shape(a, b, "add");
  Graph& g = *a.graph;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  return g.emit(std::move(out), ng, [ai = a.id, bi = b.id](Graph& g, const Graph::Node& self) {
    g.accumulate(ai, self.grad);
    g.accumulate(bi, self.grad);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_graph(a, b, "sub");
  detail::check_same_shape(a, b, "sub");
  Graph& g = *a.graph;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  return g.emit(std::move(out), ng, [ai = a.id, bi = b.id](Graph& g, const Graph::Node& self) {
    g.accumulate(ai, self.grad);
    if (g.needs_grad(bi)) {
      std::vector<double>& gb = g.grad_buf(bi);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  detail::check_same_graph(a, b, "mul");
  detail::check_same_shape(a, b, "mul");
  Graph& g = *a.graph;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  return g.emit(std::move(out), ng, [ai = a.id, bi = b.id](Graph& g, const Graph::Node& self) {
    if (g.needs_grad(ai)) {
      const std::vector<double>& bv = g.value(bi).data;
      std::vector<double>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (g.needs_grad(bi)) {
      const std::vector<double>& av = g.value(ai).data;
      std::vector<double>& gb = g.grad_buf(bi);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

inline Var divide(Var a, Var b) {
  detail::check_same_graph(a, b, "divide");
  detail::check_same_shape(a, b, "divide");
  Graph& g = *a.graph;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.data.size(); ++i) {
    if (bv.data[i] == 0.0) throw numeric_error("divide: zero denominator");
    out.data[i] /= bv.data[i];
  }
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  return g.emit(std::move(out), ng, [ai = a.id, bi = b.id](Graph& g, const Graph::Node& self) {
    const std::vector<double>& av = g.value(ai).data;
    const std::vector<double>& bv = g.value(bi).data;
    if (g.needs_grad(ai)) {
      std::vector<double>& ga = g.grad_buf(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / bv[i];
    }
    if (g.needs_grad(bi)) {
      std::vector<double>& gb = g.grad_buf(bi);
      for (size_t i = 0; i < gb.size(); ++i)
        gb[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(Var a, double c) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id, c](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (size_t i = 0; i < ga.size(); ++i) ga[i] += c * self.grad[i];
                });
}

/// Clamp to [0, 1]; gradient is zero where the input sits strictly outside.
inline Var clamp01(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  const std::vector<double>& av = g.value(ai).data;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (size_t i = 0; i < ga.size(); ++i)
                    if (av[i] >= 0.0 && av[i] <= 1.0) ga[i] += self.grad[i];
                });
}

inline Var gelu(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  const std::vector<double>& av = g.value(ai).data;
                  std::vector<double>& ga = g.grad_buf(ai);
                  constexpr double inv_sqrt_2pi = 0.3989422804014327;
                  for (size_t i = 0; i < ga.size(); ++i) {
                    double x = av[i];
                    double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    ga[i] += self.grad[i] * (cdf + x * pdf);
                  }
                });
}

// --- matrix ops --------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::check_same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape.size() == 2 && bv.shape.size() == 2 && av.shape[1] == bv.shape[0],
          "matmul: inner dimensions disagree, " + av.shape_str() + " vs " + bv.shape_str());
  const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &av.data[static_cast<size_t>(i) * k];
    double* crow = &out.data[static_cast<size_t>(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = &bv.data[static_cast<size_t>(kk) * n];
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  Graph& g = *a.graph;
  bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
  return g.emit(std::move(out), ng,
                [ai = a.id, bi = b.id, m, k, n](Graph& g, const Graph::Node& self) {
                  const std::vector<double>& go = self.grad;
                  if (g.needs_grad(ai)) {
                    // dA = dC * B^T
                    const std::vector<double>& bv = g.value(bi).data;
                    std::vector<double>& ga = g.grad_buf(ai);
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j) {
                        double goij = go[static_cast<size_t>(i) * n + j];
                        if (goij == 0.0) continue;
                        for (int kk = 0; kk < k; ++kk)
                          ga[static_cast<size_t>(i) * k + kk] +=
                              goij * bv[static_cast<size_t>(kk) * n + j];
                      }
                  }
                  if (g.needs_grad(bi)) {
                    // dB = A^T * dC
                    const std::vector<double>& av = g.value(ai).data;
                    std::vector<double>& gb = g.grad_buf(bi);
                    for (int i = 0; i < m; ++i)
                      for (int kk = 0; kk < k; ++kk) {
                        double aik = av[static_cast<size_t>(i) * k + kk];
                        if (aik == 0.0) continue;
                        for (int j = 0; j < n; ++j)
                          gb[static_cast<size_t>(kk) * n + j] +=
                              aik * go[static_cast<size_t>(i) * n + j];
                      }
                  }
                });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  require(av.shape.size() == 2, "transpose: not a matrix, shape " + av.shape_str());
  const int m = av.shape[0], n = av.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j) * m + i] = av.at(i, j);
  Graph& g = *a.graph;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id, m, n](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i)
                      ga[static_cast<size_t>(i) * n + j] +=
                          self.grad[static_cast<size_t>(j) * m + i];
                });
}

/// Row-stabilized softmax over the last axis of a matrix.
inline Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  require(av.shape.size() == 2, "softmax_rows: not a matrix, shape " + av.shape_str());
  check_finite(av, "softmax_rows input");
  const int m = av.shape[0], n = av.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = av.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, av.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  Graph& g = *a.graph;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id, m, n](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  const Tensor& y = self.value;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (int i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j)
                      dot += self.grad[static_cast<size_t>(i) * n + j] * y.at(i, j);
                    for (int j = 0; j < n; ++j)
                      ga[static_cast<size_t>(i) * n + j] +=
                          y.at(i, j) * (self.grad[static_cast<size_t>(i) * n + j] - dot);
                  }
                });
}

/// Per-row layer normalization with affine parameters over the last axis.
inline Var layernorm(Var x, Var gain, Var bias) {
  detail::check_same_graph(x, gain, "layernorm");
  detail::check_same_graph(x, bias, "layernorm");
  const Tensor& xv = x.value();
  require(xv.shape.size() == 2, "layernorm: not a matrix, shape " + xv.shape_str());
  const int m = xv.shape[0], n = xv.shape[1];
  require(gain.value().numel() == n && bias.value().numel() == n,
          "layernorm: gain/bias length must equal row width " + std::to_string(n) +
              ", got " + gain.value().shape_str() + " and " + bias.value().shape_str());
  constexpr double kEps = 1e-5;
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> xhat(static_cast<size_t>(m) * n);
  std::vector<double> inv_std(static_cast<size_t>(m));
  const std::vector<double>& gv = gain.value().data;
  const std::vector<double>& bv = bias.value().data;
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xv.at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    double is = 1.0 / std::sqrt(var + kEps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      double xh = (xv.at(i, j) - mean) * is;
      xhat[static_cast<size_t>(i) * n + j] = xh;
      out.at(i, j) = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  Graph& g = *x.graph;
  bool ng = g.needs_grad(x.id) || g.needs_grad(gain.id) || g.needs_grad(bias.id);
  return g.emit(
      std::move(out), ng,
      [xi = x.id, gi = gain.id, bi = bias.id, m, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Graph& g, const Graph::Node& self) {
        const std::vector<double>& go = self.grad;
        const std::vector<double>& gv = g.value(gi).data;
        if (g.needs_grad(gi)) {
          std::vector<double>& gg = g.grad_buf(gi);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gg[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * n + j] *
                                            xhat[static_cast<size_t>(i) * n + j];
        }
        if (g.needs_grad(bi)) {
          std::vector<double>& gb = g.grad_buf(bi);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * n + j];
        }
        if (g.needs_grad(xi)) {
          std::vector<double>& gx = g.grad_buf(xi);
          for (int i = 0; i < m; ++i) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (int j = 0; j < n; ++j) {
              double h = gv[static_cast<size_t>(j)] * go[static_cast<size_t>(i) * n + j];
              mean_h += h;
              mean_hx += h * xhat[static_cast<size_t>(i) * n + j];
            }
            mean_h /= n;
            mean_hx /= n;
            for (int j = 0; j < n; ++j) {
              double h = gv[static_cast<size_t>(j)] * go[static_cast<size_t>(i) * n + j];
              gx[static_cast<size_t>(i) * n + j] +=
                  (h - mean_h - xhat[static_cast<size_t>(i) * n + j] * mean_hx) *
                  inv_std[static_cast<size_t>(i)];
            }
          }
        }
      });
}

// --- reductions, reshapes, assembly ------------------------------------------

inline Var sum_all(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return g.emit(Tensor::scalar(s), g.needs_grad(a.id),
                [ai = a.id](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (double& v : ga) v += self.grad[0];
                });
}

/// Column sums of a matrix: [m x n] -> [1 x n].
inline Var sum_rows(Var a) {
  const Tensor& av = a.value();
  require(av.shape.size() == 2, "sum_rows: not a matrix, shape " + av.shape_str());
  const int m = av.shape[0], n = av.shape[1];
  Tensor out = Tensor::zeros({1, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j)] += av.at(i, j);
  Graph& g = *a.graph;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id, m, n](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  std::vector<double>& ga = g.grad_buf(ai);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      ga[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j)];
                });
}

/// Submatrix [r0, r1) x [c0, c1).
inline Var slice(Var a, int r0, int r1, int c0, int c1) {
  const Tensor& av = a.value();
  require(av.shape.size() == 2, "slice: not a matrix, shape " + av.shape_str());
  const int m = av.shape[0], n = av.shape[1];
  require(0 <= r0 && r0 < r1 && r1 <= m && 0 <= c0 && c0 < c1 && c1 <= n,
          "slice: window [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" +
              std::to_string(c0) + "," + std::to_string(c1) + ") out of bounds for " +
              av.shape_str());
  Tensor out = Tensor::zeros({r1 - r0, c1 - c0});
  for (int i = r0; i < r1; ++i)
    for (int j = c0; j < c1; ++j)
      out.data[static_cast<size_t>(i - r0) * (c1 - c0) + (j - c0)] = av.at(i, j);
  Graph& g = *a.graph;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id, r0, r1, c0, c1, n](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ai)) return;
                  std::vector<double>& ga = g.grad_buf(ai);
                  const int w = c1 - c0;
                  for (int i = r0; i < r1; ++i)
                    for (int j = c0; j < c1; ++j)
                      ga[static_cast<size_t>(i) * n + j] +=
                          self.grad[static_cast<size_t>(i - r0) * w + (j - c0)];
                });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  Graph& g = *parts[0].graph;
  const int n = parts[0].value().shape[1];
  int m = 0;
  bool ng = false;
  for (Var p : parts) {
    detail::check_same_graph(parts[0], p, "concat_rows");
    require(p.value().shape.size() == 2 && p.value().shape[1] == n,
            "concat_rows: column mismatch, " + p.value().shape_str());
    m += p.value().shape[0];
    ng = ng || g.needs_grad(p.id);
  }
  Tensor out = Tensor::zeros({m, n});
  size_t off = 0;
  std::vector<std::pair<int, int>> blocks;  // (node id, rows)
  for (Var p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<long>(off));
    blocks.emplace_back(p.id, pv.shape[0]);
    off += pv.data.size();
  }
  return g.emit(std::move(out), ng,
                [blocks = std::move(blocks), n](Graph& g, const Graph::Node& self) {
                  size_t off = 0;
                  for (auto [id, rows] : blocks) {
                    size_t len = static_cast<size_t>(rows) * n;
                    if (g.needs_grad(id)) {
                      std::vector<double>& gp = g.grad_buf(id);
                      for (size_t i = 0; i < len; ++i) gp[i] += self.grad[off + i];
                    }
                    off += len;
                  }
                });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  Graph& g = *parts[0].graph;
  const int m = parts[0].value().shape[0];
  int n = 0;
  bool ng = false;
  for (Var p : parts) {
    detail::check_same_graph(parts[0], p, "concat_cols");
    require(p.value().shape.size() == 2 && p.value().shape[0] == m,
            "concat_cols: row mismatch, " + p.value().shape_str());
    n += p.value().shape[1];
    ng = ng || g.needs_grad(p.id);
  }
  Tensor out = Tensor::zeros({m, n});
  int coff = 0;
  std::vector<std::pair<int, int>> blocks;  // (node id, cols)
  for (Var p : parts) {
    const Tensor& pv = p.value();
    const int w = pv.shape[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out.data[static_cast<size_t>(i) * n + coff + j] = pv.at(i, j);
    blocks.emplace_back(p.id, w);
    coff += w;
  }
  return g.emit(std::move(out), ng,
                [blocks = std::move(blocks), m, n](Graph& g, const Graph::Node& self) {
                  int coff = 0;
                  for (auto [id, w] : blocks) {
                    if (g.needs_grad(id)) {
                      std::vector<double>& gp = g.grad_buf(id);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                          gp[static_cast<size_t>(i) * w + j] +=
                              self.grad[static_cast<size_t>(i) * n + coff + j];
                    }
                    coff += w;
                  }
                });
}

/// Gather rows of an embedding table: out[i, :] = table[ids[i], :].
inline Var lookup_rows(Var table, const std::vector<int>& ids) {
  const Tensor& tv = table.value();
  require(tv.shape.size() == 2, "lookup_rows: table is not a matrix");
  const int v = tv.shape[0], d = tv.shape[1];
  for (int id : ids)
    require(0 <= id && id < v,
            "lookup_rows: id " + std::to_string(id) + " out of range [0," +
                std::to_string(v) + ")");
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < d; ++j) out.data[i * d + j] = tv.at(ids[i], j);
  Graph& g = *table.graph;
  return g.emit(std::move(out), g.needs_grad(table.id),
                [ti = table.id, ids, d](Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(ti)) return;
                  std::vector<double>& gt = g.grad_buf(ti);
                  for (size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < d; ++j)
                      gt[static_cast<size_t>(ids[i]) * d + j] += self.grad[i * d + j];
                });
}

/// Broadcast a length-n vector over the rows of an [m x n] matrix.
inline Var add_rowvec(Var x, Var bias) {
  detail::check_same_graph(x, bias, "add_rowvec");
  const Tensor& xv = x.value();
  require(xv.shape.size() == 2, "add_rowvec: not a matrix, shape " + xv.shape_str());
  const int m = xv.shape[0], n = xv.shape[1];
  require(bias.value().numel() == n,
          "add_rowvec: bias length " + bias.value().shape_str() + " vs row width " +
              std::to_string(n));
  Tensor out = xv;
  const std::vector<double>& bv = bias.value().data;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += bv[static_cast<size_t>(j)];
  Graph& g = *x.graph;
  bool ng = g.needs_grad(x.id) || g.needs_grad(bias.id);
  return g.emit(std::move(out), ng,
                [xi = x.id, bi = bias.id, m, n](Graph& g, const Graph::Node& self) {
                  g.accumulate(xi, self.grad);
                  if (g.needs_grad(bi)) {
                    std::vector<double>& gb = g.grad_buf(bi);
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j)
                        gb[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * n + j];
                  }
                });
}

inline Var reshape(Var a, std::vector<int> new_shape) {
  const Tensor& av = a.value();
  require(Tensor::numel_of(new_shape) == av.numel(),
          "reshape: element count mismatch, " + av.shape_str() + " -> " +
              Tensor::shape_str_of(new_shape));
  Tensor out = av;
  out.shape = std::move(new_shape);
  Graph& g = *a.graph;
  return g.emit(std::move(out), g.needs_grad(a.id),
                [ai = a.id](Graph& g, const Graph::Node& self) {
                  g.accumulate(ai, self.grad);
                });
}

/// Mean next-token cross entropy over explicit (row, target) pairs.
/// Fused log-softmax keeps the loss stable for large logits.
inline Var cross_entropy_rows(Var logits, const std::vector<std::pair<int, int>>& row_targets) {
  const Tensor& lv = logits.value();
  require(lv.shape.size() == 2, "cross_entropy_rows: logits not a matrix");
  require(!row_targets.empty(), "cross_entropy_rows: no targets");
  const int m = lv.shape[0], v = lv.shape[1];
  for (auto [r, t] : row_targets)
    require(0 <= r && r < m && 0 <= t && t < v,
            "cross_entropy_rows: pair (" + std::to_string(r) + "," + std::to_string(t) +
                ") out of range for " + lv.shape_str());
  // Save per-pair softmax for the backward pass.
  std::vector<double> probs(row_targets.size() * static_cast<size_t>(v));
  double loss = 0.0;
  for (size_t p = 0; p < row_targets.size(); ++p) {
    auto [r, t] = row_targets[p];
    double mx = lv.at(r, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, lv.at(r, j));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(lv.at(r, j) - mx);
    double lse = std::log(sum) + mx;
    loss += lse - lv.at(r, t);
    for (int j = 0; j < v; ++j)
      probs[p * static_cast<size_t>(v) + j] = std::exp(lv.at(r, j) - lse);
  }
  loss /= static_cast<double>(row_targets.size());
  Graph& g = *logits.graph;
  return g.emit(Tensor::scalar(loss), g.needs_grad(logits.id),
                [li = logits.id, row_targets, probs = std::move(probs), v](
                    Graph& g, const Graph::Node& self) {
                  if (!g.needs_grad(li)) return;
                  std::vector<double>& gl = g.grad_buf(li);
                  double scale = self.grad[0] / static_cast<double>(row_targets.size());
                  for (size_t p = 0; p < row_targets.size(); ++p) {
                    auto [r, t] = row_targets[p];
                    for (int j = 0; j < v; ++j)
                      gl[static_cast<size_t>(r) * v + j] +=
                          scale * (probs[p * static_cast<size_t>(v) + j] - (j == t ? 1.0 : 0.0));
                  }
                });
}

}  // namespace attnsteer
