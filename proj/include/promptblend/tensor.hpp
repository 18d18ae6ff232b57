#pragma once

// Dense row-major float64 tensors with reverse-mode autodiff.
//
// A Tensor is a shared handle: copying it aliases the same storage and graph
// node, the way framework tensors behave. Use clone() for an independent copy
// and detach() to cut a value out of the graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "promptblend/error.hpp"
#include "promptblend/rng.hpp"

namespace promptblend {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) {
      grad.assign(data.size(), 0.0);
    }
    return grad;
  }
};

// C[MxN] += A[MxK] * B[KxN]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) {
        continue;
      }
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// C[MxN] += A[MxK] * B[NxK]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += arow[p] * brow[p];
      }
      c[i * n + j] += acc;
    }
  }
}

// C[MxN] += A[KxM]^T * B[KxN]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) {
        continue;
      }
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.empty()) {
      throw ShapeError("tensor needs at least one dimension");
    }
    for (std::size_t dim : shape) {
      if (dim == 0) {
        throw ShapeError("zero-sized dimension in " + shape_str(shape));
      }
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Writable storage. Only meant for leaves (parameters, inputs, tests).
  std::span<double> mutable_data() { return node_->data; }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * node_->shape.back() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) {
      throw StateError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const { return from(shape(), node_->data, false); }

  Tensor clone() const { return from(shape(), node_->data, requires_grad()); }

  /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
  /// calls; intermediate gradients are scratch and released afterwards.
  void backward() const {
    if (size() != 1) {
      throw ShapeError("backward() needs a scalar root, got " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
      return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next_parent] = stack.back();
      if (next_parent < node->parents.size()) {
        detail::Node* parent = node->parents[next_parent++].get();
        if (parent->requires_grad && visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (detail::Node* node : order) {
      if (!node->is_leaf()) {
        node->grad.assign(node->data.size(), 0.0);
      } else {
        node->ensure_grad();
      }
    }
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backward_fn) {
        node->backward_fn(*node);
      }
    }
    for (detail::Node* node : order) {
      if (!node->is_leaf()) {
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result. Parents and the backward closure are only retained
// when at least one parent participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  for (const auto& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
  }
  if (node->requires_grad) {
    for (auto& p : parents) {
      node->parents.push_back(p.node_ptr());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      detail::gemm_nt(m, n, k, g, pb.data.data(), pa.grad.data());
    }
    if (pb.requires_grad) {
      detail::gemm_tn(k, m, n, pa.data.data(), g, pb.grad.data());
    }
  });
}

/// a * b^T without materialising the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      detail::gemm_nn(m, n, k, g, pb.data.data(), pa.grad.data());
    }
    if (pb.requires_grad) {
      detail::gemm_tn(n, m, k, g, pa.data.data(), pb.grad.data());
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] + b.data()[i];
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (self.parents[p]->requires_grad) {
        auto& pg = self.parents[p]->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) {
          pg[i] += self.grad[i];
        }
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] - b.data()[i];
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t p = 0; p < 2; ++p) {
      if (self.parents[p]->requires_grad) {
        auto& pg = self.parents[p]->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) {
          pg[i] += sign[p] * self.grad[i];
        }
      }
    }
  });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] * b.data()[i];
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < pa.grad.size(); ++i) {
        pa.grad[i] += self.grad[i] * pb.data[i];
      }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < pb.grad.size(); ++i) {
        pb.grad[i] += self.grad[i] * pa.data[i];
      }
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] * factor;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto& pg = self.parents[0]->grad;
    for (std::size_t i = 0; i < pg.size(); ++i) {
      pg[i] += factor * self.grad[i];
    }
  });
}

/// x[m x n] + bias[n], bias broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.size() != n) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] += bias.data()[j];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < px.grad.size(); ++i) {
        px.grad[i] += self.grad[i];
      }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          pb.grad[j] += self.grad[i * n + j];
        }
      }
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) {
    total += v;
  }
  return detail::make_result({1}, {total}, {a}, [](detail::Node& self) {
    auto& pg = self.parents[0]->grad;
    const double g = self.grad[0];
    for (double& v : pg) {
      v += g;
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Mean of a list of scalars, summed in list order.
inline Tensor mean_of(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) {
    throw ShapeError("mean_of: empty list");
  }
  Tensor total = scalars.front();
  for (std::size_t i = 1; i < scalars.size(); ++i) {
    total = add(total, scalars[i]);
  }
  return scale(total, 1.0 / static_cast<double>(scalars.size()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& pg = self.parents[0]->grad;
    for (std::size_t i = 0; i < pg.size(); ++i) {
      pg[i] += self.grad[i];
    }
  });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      const double x = p.data[i];
      const double u = kC * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      p.grad[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

/// Row-wise softmax over the last axis. Where `allowed` is given (row-major,
/// same extent as x), disallowed entries get probability exactly 0 and never
/// touch the normaliser. A row with nothing allowed becomes all zeros.
inline Tensor softmax_rows(const Tensor& x, const std::vector<std::uint8_t>* allowed = nullptr) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (allowed && allowed->size() != m * n) {
    throw ShapeError("softmax_rows: mask size does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (!allowed || (*allowed)[i * n + j]) {
        const double v = xd[i * n + j];
        mx = (v > mx || std::isnan(v)) ? v : mx;
      }
    }
    if (mx == -INFINITY) {
      continue;
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!allowed || (*allowed)[i * n + j]) {
        const double e = std::exp(xd[i * n + j] - mx);
        out[i * n + j] = e;
        denom += e;
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] /= denom;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        dot += y[i * n + j] * g[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        p.grad[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    }
  });
}

/// Layer normalisation of each row, with learned gain and shift of width n.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& shift,
                              double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.size() != n || shift.size() != n) {
    throw ShapeError("layer_norm_rows: gain/shift width does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mu += xd[i * n + j];
    }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xd[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xd[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.data()[j] + shift.data()[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, shift},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < m; ++i) {
          if (pg.requires_grad || pb.requires_grad) {
            for (std::size_t j = 0; j < n; ++j) {
              if (pg.requires_grad) {
                pg.grad[j] += g[i * n + j] * xhat[i * n + j];
              }
              if (pb.requires_grad) {
                pb.grad[j] += g[i * n + j];
              }
            }
          }
          if (px.requires_grad) {
            double mean_dy = 0.0;
            double mean_dy_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g[i * n + j] * pg.data[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[i * n + j];
            }
            mean_dy /= static_cast<double>(n);
            mean_dy_xhat /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g[i * n + j] * pg.data[j];
              px.grad[i * n + j] += inv_std[i] * (dy - mean_dy - xhat[i * n + j] * mean_dy_xhat);
            }
          }
        }
      });
}

/// Stacks a[m1 x n] over b[m2 x n].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_rows: widths differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.size();
  return detail::make_result({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b},
                             [split](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 for (std::size_t i = 0; i < pa.grad.size(); ++i) {
                                   pa.grad[i] += self.grad[i];
                                 }
                               }
                               if (pb.requires_grad) {
                                 for (std::size_t i = 0; i < pb.grad.size(); ++i) {
                                   pb.grad[i] += self.grad[split + i];
                                 }
                               }
                             });
}

/// Embedding lookup: row t of the result is table[ids[t]].
inline Tensor gather_rows(const Tensor& table, std::span<const TokenId> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t rows = table.dim(0), n = table.dim(1);
  if (ids.empty()) {
    throw ShapeError("gather_rows: empty id list");
  }
  std::vector<double> out(ids.size() * n);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= rows) {
      throw IndexError("token id " + std::to_string(ids[t]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[t] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(t * n));
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return detail::make_result({ids.size(), n}, std::move(out), {table},
                             [n, saved = std::move(saved)](detail::Node& self) {
                               auto& pg = self.parents[0]->grad;
                               for (std::size_t t = 0; t < saved.size(); ++t) {
                                 const std::size_t base = static_cast<std::size_t>(saved[t]) * n;
                                 for (std::size_t j = 0; j < n; ++j) {
                                   pg[base + j] += self.grad[t * n + j];
                                 }
                               }
                             });
}

/// Mean over the rows flagged in `keep`; returns a vector of width n.
inline Tensor masked_mean_rows(const Tensor& x, const std::vector<std::uint8_t>& keep) {
  detail::require_matrix(x, "masked_mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (keep.size() != m) {
    throw ShapeError("masked_mean_rows: mask length does not match rows");
  }
  const auto count = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
  if (count == 0) {
    throw DegenerateLossError("masked_mean_rows: no rows selected");
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (keep[i]) {
      for (std::size_t j = 0; j < n; ++j) {
        out[j] += x.data()[i * n + j];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out) {
    v *= inv;
  }
  return detail::make_result({n}, std::move(out), {x}, [m, n, inv, keep](detail::Node& self) {
    auto& pg = self.parents[0]->grad;
    for (std::size_t i = 0; i < m; ++i) {
      if (keep[i]) {
        for (std::size_t j = 0; j < n; ++j) {
          pg[i * n + j] += inv * self.grad[j];
        }
      }
    }
  });
}

/// Mean token-level cross-entropy of logits[T x V] against targets, skipping
/// positions whose target equals pad_id.
inline Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                            TokenId pad_id) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t t_len = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t_len) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()) + " logits");
  }
  std::size_t count = 0;
  for (TokenId t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    count += (t != pad_id) ? 1 : 0;
  }
  if (count == 0) {
    throw DegenerateLossError("cross_entropy: every target position is padding");
  }
  const double* ld = logits.data().data();
  std::vector<double> probs(t_len * v, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < t_len; ++i) {
    if (targets[i] == pad_id) {
      continue;
    }
    double mx = -INFINITY;
    for (std::size_t j = 0; j < v; ++j) {
      mx = std::max(mx, ld[i * v + j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(ld[i * v + j] - mx);
      probs[i * v + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] /= denom;
    }
    total += -(ld[i * v + static_cast<std::size_t>(targets[i])] - mx - std::log(denom));
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return detail::make_result(
      {1}, {total * inv}, {logits},
      [t_len, v, inv, pad_id, probs = std::move(probs), saved = std::move(saved)](
          detail::Node& self) {
        auto& pg = self.parents[0]->grad;
        const double g = self.grad[0] * inv;
        for (std::size_t i = 0; i < t_len; ++i) {
          if (saved[i] == pad_id) {
            continue;
          }
          for (std::size_t j = 0; j < v; ++j) {
            pg[i * v + j] += g * probs[i * v + j];
          }
          pg[i * v + static_cast<std::size_t>(saved[i])] -= g;
        }
      });
}

/// Inverted dropout. Eval mode, or p == 0, hands back x itself.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) {
    return x;
  }
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [mask = std::move(mask)](detail::Node& self) {
                               auto& pg = self.parents[0]->grad;
                               for (std::size_t i = 0; i < pg.size(); ++i) {
                                 pg[i] += self.grad[i] * mask[i];
                               }
                             });
}

}  // namespace promptblend
