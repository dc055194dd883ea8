#pragma once

// Dense 64-bit tensors with a dynamic reverse-mode tape.
//
// Every op that has at least one input with requires_grad records a node
// holding its parents and a backward closure. The graph is rebuilt on every
// forward pass, which matters because rewrite layers change structure per
// example. backward() walks the graph in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rewritenet/error.hpp"
#include "rewritenet/rng.hpp"

namespace rewritenet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 0 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return rank() < 2 ? 1 : node_->shape[1]; }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }

  /// Gradient slot, allocated as zeros on first access.
  std::span<double> grad_buffer() const {
    if (!has_grad()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  std::string_view op_name() const { return node_->op; }
  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds the result of a differentiable op. `backward` receives the output
/// gradient and must accumulate into the grad buffers of the parents it
/// captured. It is only kept if some parent requires a gradient.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(const std::vector<double>&)> backward,
                      std::string_view op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
  Tensor out(std::move(shape), std::move(data), false);
  const bool needs_grad = std::any_of(parents.begin(), parents.end(),
                                      [](const Tensor& p) { return p.requires_grad(); });
  auto* node = out.node();
  node->op = op;
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.shared_node());
    node->backward = std::move(backward);
  }
  return out;
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset first so a second call adds
/// exactly one more copy of d(loss)/d(leaf).
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->backward) node->grad.assign(node->data.size(), 0.0);
  }
  if (root->grad.size() != 1) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;
    for (double g : node->grad) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient flowing into " + std::string(node->op));
      }
    }
    node->backward(node->grad);
  }
}

namespace ops {

namespace detail_ops {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, std::string_view op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace detail_ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](const std::vector<double>& g) mutable {
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                   }
                 },
                 "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](const std::vector<double>& g) mutable {
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                   }
                 },
                 "sub");
}

/// Elementwise product.
inline Tensor multiply(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "multiply");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](const std::vector<double>& g) mutable {
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                   }
                 },
                 "multiply");
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return make_op(a.shape(), std::move(out), {a},
                 [a, c](const std::vector<double>& g) mutable {
                   auto ga = a.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                 },
                 "scale");
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op({1}, {s}, {a},
                 [a](const std::vector<double>& g) mutable {
                   auto ga = a.grad_buffer();
                   for (auto& v : ga) v += g[0];
                 },
                 "sum");
}

/// (n x k) * (k x m)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail_ops::require_matrix(a, "matmul");
  detail_ops::require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * B[p * m + j];
    }
  return make_op({n, m}, std::move(out), {a, b},
                 [a, b, n, k, m](const std::vector<double>& g) mutable {
                   const auto A = a.data();
                   const auto B = b.data();
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double s = 0.0;
                         for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * B[p * m + j];
                         ga[i * k + p] += s;
                       }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double av = A[i * k + p];
                         for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
                       }
                   }
                 },
                 "matmul");
}

/// (n x k) * (m x k)^T, used for tied output embeddings.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  detail_ops::require_matrix(a, "matmul_transposed");
  detail_ops::require_matrix(b, "matmul_transposed");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_transposed: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * m + j] = s;
    }
  return make_op({n, m}, std::move(out), {a, b},
                 [a, b, n, k, m](const std::vector<double>& g) mutable {
                   const auto A = a.data();
                   const auto B = b.data();
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < m; ++j) {
                         const double gv = g[i * m + j];
                         if (gv == 0.0) continue;
                         for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * B[j * k + p];
                       }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < m; ++j) {
                         const double gv = g[i * m + j];
                         if (gv == 0.0) continue;
                         for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * A[i * k + p];
                       }
                   }
                 },
                 "matmul_transposed");
}

/// Valid 1-D cross-correlation of an (n x d) sequence with R kernels of shape
/// (L x d): out[i, r] = sum_k sum_j x[i+k, j] * kernel[r, k, j].
inline Tensor conv1d_valid(const Tensor& x, const Tensor& kernels) {
  detail_ops::require_matrix(x, "conv1d_valid");
  if (kernels.rank() != 3 || kernels.dim(2) != x.cols()) {
    throw ShapeError("conv1d_valid: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(kernels.shape()));
  }
  const std::size_t n = x.rows(), d = x.cols(), R = kernels.dim(0), L = kernels.dim(1);
  if (n < L) {
    throw ShapeError("conv1d_valid: sequence of length " + std::to_string(n) +
                     " is shorter than kernel length " + std::to_string(L));
  }
  const std::size_t windows = n - L + 1;
  const std::size_t span_len = L * d;  // window rows are contiguous in x
  std::vector<double> out(windows * R);
  const auto X = x.data();
  const auto K = kernels.data();
  for (std::size_t i = 0; i < windows; ++i) {
    const double* w = X.data() + i * d;
    for (std::size_t r = 0; r < R; ++r) {
      const double* kr = K.data() + r * span_len;
      double s = 0.0;
      for (std::size_t p = 0; p < span_len; ++p) s += w[p] * kr[p];
      out[i * R + r] = s;
    }
  }
  return make_op({windows, R}, std::move(out), {x, kernels},
                 [x, kernels, windows, R, span_len, d](const std::vector<double>& g) mutable {
                   const auto X = x.data();
                   const auto K = kernels.data();
                   std::span<double> gx, gk;
                   if (x.requires_grad()) gx = x.grad_buffer();
                   if (kernels.requires_grad()) gk = kernels.grad_buffer();
                   for (std::size_t i = 0; i < windows; ++i)
                     for (std::size_t r = 0; r < R; ++r) {
                       const double gv = g[i * R + r];
                       if (gv == 0.0) continue;
                       if (!gx.empty()) {
                         double* w = gx.data() + i * d;
                         const double* kr = K.data() + r * span_len;
                         for (std::size_t p = 0; p < span_len; ++p) w[p] += gv * kr[p];
                       }
                       if (!gk.empty()) {
                         const double* w = X.data() + i * d;
                         double* kr = gk.data() + r * span_len;
                         for (std::size_t p = 0; p < span_len; ++p) kr[p] += gv * w[p];
                       }
                     }
                 },
                 "conv1d_valid");
}

inline Tensor softmax_rows(const Tensor& a) {
  detail_ops::require_matrix(a, "softmax_rows");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.data().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  auto probs = out;
  return make_op(a.shape(), std::move(out), {a},
                 [a, probs = std::move(probs), n, m](const std::vector<double>& g) mutable {
                   auto ga = a.grad_buffer();
                   for (std::size_t i = 0; i < n; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * probs[i * m + j];
                     for (std::size_t j = 0; j < m; ++j)
                       ga[i * m + j] += probs[i * m + j] * (g[i * m + j] - dot);
                   }
                 },
                 "softmax_rows");
}

/// Per-row normalization to zero mean / unit variance followed by an affine
/// gain and bias (each of shape {d}).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail_ops::require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: shape mismatch " + shape_string(x.shape()) + " vs gain " +
                     shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()));
  }
  std::vector<double> xhat(n * d), inv_std(n), out(n * d);
  const auto X = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += X[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = X[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (X[i * d + j] - mean) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  return make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
       d](const std::vector<double>& g) mutable {
        if (gain.requires_grad()) {
          auto gg = gain.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain[j];
              gx[i * d + j] +=
                  inv_std[i] * (gh - inv_d * sum_g - xhat[i * d + j] * inv_d * sum_gx);
            }
          }
        }
      },
      "layer_norm");
}

/// Inverted dropout. When `row_mask` is non-empty only rows flagged true are
/// subject to dropout. Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training,
                      const std::vector<bool>& row_mask = {}) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ShapeError("dropout: probability must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const std::size_t n = x.rows(), d = x.numel() / std::max<std::size_t>(1, x.rows());
  std::vector<double> mask(x.numel(), 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) {
    if (!row_mask.empty() && !row_mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) mask[i * d + j] = rng.uniform() < p ? 0.0 : keep_scale;
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return make_op(x.shape(), std::move(out), {x},
                 [x, mask = std::move(mask)](const std::vector<double>& g) mutable {
                   auto gx = x.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                 },
                 "dropout");
}

/// Rows of `table` selected by `ids`, in order.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail_ops::require_matrix(table, "gather_rows");
  const std::size_t d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                       shape_string(table.shape()));
    }
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return make_op({ids.size(), d}, std::move(out), {table},
                 [table, ids, d](const std::vector<double>& g) mutable {
                   auto gt = table.grad_buffer();
                   for (std::size_t i = 0; i < ids.size(); ++i)
                     for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
                 },
                 "gather_rows");
}

/// Stacks matrices with equal column counts. Zero-row inputs are allowed.
inline Tensor concat_rows(const std::vector<Tensor>& parts, std::size_t cols) {
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != cols) {
      throw ShapeError("concat_rows: shape mismatch " + shape_string(p.shape()) + " vs [*," +
                       std::to_string(cols) + "]");
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op({total, cols}, std::move(out), parts,
                 [parts](const std::vector<double>& g) mutable {
                   std::size_t offset = 0;
                   for (auto& p : parts) {
                     if (p.requires_grad()) {
                       auto gp = p.grad_buffer();
                       for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
                     }
                     offset += p.numel();
                   }
                 },
                 "concat_rows");
}

/// [a | b] for matrices with equal row counts.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail_ops::require_matrix(a, "concat_cols");
  detail_ops::require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, out.begin() + i * c);
    std::copy_n(b.data().begin() + i * cb, cb, out.begin() + i * c + ca);
  }
  return make_op({n, c}, std::move(out), {a, b},
                 [a, b, n, ca, cb, c](const std::vector<double>& g) mutable {
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * c + j];
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * c + ca + j];
                   }
                 },
                 "concat_cols");
}

/// Broadcasts a single row (any shape with numel == c) to an (n x c) matrix.
inline Tensor repeat_rows(const Tensor& row, std::size_t n) {
  const std::size_t c = row.numel();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(row.data().begin(), c, out.begin() + i * c);
  return make_op({n, c}, std::move(out), {row},
                 [row, n, c](const std::vector<double>& g) mutable {
                   auto gr = row.grad_buffer();
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
                 },
                 "repeat_rows");
}

/// Mean token cross-entropy of row-wise logits against integer targets over
/// positions where `include` is true (pad positions are excluded).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            const std::vector<bool>& include) {
  detail_ops::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), V = logits.cols();
  if (targets.size() != n || include.size() != n) {
    throw ShapeError("cross_entropy: shape mismatch " + shape_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const auto count = static_cast<std::size_t>(std::count(include.begin(), include.end(), true));
  if (count == 0) throw ShapeError("cross_entropy: every position is masked");
  std::vector<double> probs(n * V);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += (probs[i * V + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= z;
    if (!include[i]) continue;
    if (targets[i] >= V) throw ShapeError("cross_entropy: target id out of range");
    total += -(row[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  return make_op({1}, {total * inv}, {logits},
                 [logits, targets, include, probs = std::move(probs), n, V,
                  inv](const std::vector<double>& g) mutable {
                   auto gl = logits.grad_buffer();
                   for (std::size_t i = 0; i < n; ++i) {
                     if (!include[i]) continue;
                     for (std::size_t j = 0; j < V; ++j) {
                       const double y = (j == targets[i]) ? 1.0 : 0.0;
                       gl[i * V + j] += g[0] * inv * (probs[i * V + j] - y);
                     }
                   }
                 },
                 "cross_entropy");
}

struct WeightedEntry {
  std::size_t row = 0;
  std::size_t col = 0;
  double weight = 1.0;
};

/// Scalar sum_k w_k * m[row_k, col_k].
inline Tensor select_sum(const Tensor& m, const std::vector<WeightedEntry>& entries) {
  detail_ops::require_matrix(m, "select_sum");
  double s = 0.0;
  for (const auto& e : entries) {
    if (e.row >= m.rows() || e.col >= m.cols()) {
      throw ShapeError("select_sum: entry out of range for " + shape_string(m.shape()));
    }
    s += e.weight * m.at(e.row, e.col);
  }
  const std::size_t cols = m.cols();
  return make_op({1}, {s}, {m},
                 [m, entries, cols](const std::vector<double>& g) mutable {
                   auto gm = m.grad_buffer();
                   for (const auto& e : entries) gm[e.row * cols + e.col] += g[0] * e.weight;
                 },
                 "select_sum");
}

}  // namespace ops

}  // namespace rewritenet
