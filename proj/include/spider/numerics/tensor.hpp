#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "spider/core/error.hpp"

namespace spider::nn {

// Reverse-mode autograd over a dynamically recorded graph. Every tensor is a
// row-major matrix; vectors are 1 x n and scalars 1 x 1.

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

inline bool grad_enabled() { return detail::grad_mode_enabled; }

// Disables graph recording for its lifetime (evaluation and finite
// differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return rows * cols; }
  T* grad_data() {
    if (grad.empty()) grad.assign(size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return from(rows, cols, std::vector<T>(rows * cols, T(0)), requires_grad);
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<T> values,
                     bool requires_grad = false) {
    if (values.size() != rows * cols) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape (" + std::to_string(rows) + ", " +
                       std::to_string(cols) + ")");
    }
    auto node = std::make_shared<Node<T>>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from(1, n, std::move(values), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from(1, 1, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_data(), size()}; }
  void zero_grad() { node_->grad.clear(); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Accumulates d(this)/d(leaf) into every reachable leaf's grad. The tensor
  // must be a scalar unless an explicit seed is supplied.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() without seed requires a scalar");
    backward(std::vector<T>{T(1)});
  }

  void backward(const std::vector<T>& seed) const {
    if (seed.size() != size()) throw ShapeError("backward seed shape mismatch");
    std::vector<Node<T>*> order;
    topological_order(order);
    T* g = node_->grad_data();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
    }
  }

 private:
  void topological_order(std::vector<Node<T>*>& order) const {
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> view(const Node<T>& n) {
  return ConstMapMat<T>(n.value.data(), static_cast<Eigen::Index>(n.rows),
                        static_cast<Eigen::Index>(n.cols));
}

template <typename T>
MapMat<T> grad_view(Node<T>& n) {
  return MapMat<T>(n.grad_data(), static_cast<Eigen::Index>(n.rows),
                   static_cast<Eigen::Index>(n.cols));
}

template <typename T>
ConstMapMat<T> grad_cview(Node<T>& n) {
  return ConstMapMat<T>(n.grad_data(), static_cast<Eigen::Index>(n.rows),
                        static_cast<Eigen::Index>(n.cols));
}

// Builds the output node and wires it into the graph when any input needs a
// gradient and recording is on.
template <typename T>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> value,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>(std::move(node));
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + ", " + std::to_string(c) + ")";
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                     " vs " + shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + detail::shape_str(a.rows(), a.cols()) +
                     " x " + detail::shape_str(b.rows(), b.cols()));
  }
  std::vector<T> out(a.rows() * b.cols());
  detail::MapMat<T>(out.data(), a.rows(), b.cols()).noalias() =
      detail::view(a.node()) * detail::view(b.node());
  return detail::make_result<T>(a.rows(), b.cols(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    auto g = detail::grad_cview(self);
    if (pa.requires_grad) detail::grad_view(pa).noalias() += g * detail::view(pb).transpose();
    if (pb.requires_grad) detail::grad_view(pb).noalias() += detail::view(pa).transpose() * g;
  });
}

// a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions " + detail::shape_str(a.rows(), a.cols()) +
                     " x " + detail::shape_str(b.rows(), b.cols()) + "^T");
  }
  std::vector<T> out(a.rows() * b.rows());
  detail::MapMat<T>(out.data(), a.rows(), b.rows()).noalias() =
      detail::view(a.node()) * detail::view(b.node()).transpose();
  return detail::make_result<T>(a.rows(), b.rows(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    auto g = detail::grad_cview(self);
    if (pa.requires_grad) detail::grad_view(pa).noalias() += g * detail::view(pb);
    if (pb.requires_grad) detail::grad_view(pb).noalias() += g.transpose() * detail::view(pa);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  detail::MapMat<T>(out.data(), a.cols(), a.rows()) = detail::view(a.node()).transpose();
  return detail::make_result<T>(a.cols(), a.rows(), std::move(out), {a}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    detail::grad_view(pa) += detail::grad_cview(self).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

// Same-shape addition, or row broadcast when b is 1 x cols.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
  if (!broadcast) detail::require_same_shape(a, b, "add");
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* brow = broadcast ? bd.data() : bd.data() + r * cols;
    T* orow = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) orow[c] += brow[c];
  }
  return detail::make_result<T>(rows, cols, std::move(out), {a, b}, [broadcast](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T* g = self.grad.data();
    if (pa.requires_grad) {
      T* ga = pa.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_data();
      if (broadcast) {
        for (std::size_t r = 0; r < self.rows; ++r)
          for (std::size_t c = 0; c < self.cols; ++c) gb[c] += g[r * self.cols + c];
      } else {
        for (std::size_t i = 0; i < self.size(); ++i) gb[i] += g[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T* g = self.grad.data();
    if (pa.requires_grad) {
      T* ga = pa.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T* g = self.grad.data();
    if (pa.requires_grad) {
      T* ga = pa.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) ga[i] += g[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) gb[i] += g[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T* g = self.grad.data();
    if (pa.requires_grad) {
      T* ga = pa.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) ga[i] += g[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i)
        gb[i] -= g[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a}, [factor](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data();
    for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {
template <typename T, typename F, typename D>
Tensor<T> pointwise(const Tensor<T>& a, F f, D dfdx) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result<T>(a.rows(), a.cols(), std::move(out), {a}, [dfdx](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data();
    for (std::size_t i = 0; i < self.size(); ++i)
      ga[i] += self.grad[i] * dfdx(pa.value[i], self.value[i]);
  });
}
}  // namespace detail

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::pointwise(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::pointwise(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::pointwise(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data() + r * cols;
    const T m = *std::max_element(x, x + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return detail::make_result<T>(rows, cols, std::move(out), {a}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data();
    for (std::size_t r = 0; r < self.rows; ++r) {
      const T* y = self.value.data() + r * self.cols;
      const T* g = self.grad.data() + r * self.cols;
      T dot = 0;
      for (std::size_t c = 0; c < self.cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < self.cols; ++c) ga[r * self.cols + c] += y[c] * (g[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-12)) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) throw ShapeError("layer_norm: gain/bias width mismatch");
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (xr[c] - mean) * rstd[r];
      out[r * cols + c] = xhat[r * cols + c] * gain.data()[c] + bias.data()[c];
    }
  }
  return detail::make_result<T>(
      rows, cols, std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        Node<T>& pb = *self.parents[2];
        const std::size_t cols = self.cols;
        const T* g = self.grad.data();
        if (pg.requires_grad) {
          T* gg = pg.grad_data();
          for (std::size_t i = 0; i < self.size(); ++i) gg[i % cols] += g[i] * xhat[i];
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_data();
          for (std::size_t i = 0; i < self.size(); ++i) gb[i % cols] += g[i];
        }
        if (px.requires_grad) {
          T* gx = px.grad_data();
          std::vector<T> dxhat(cols);
          for (std::size_t r = 0; r < self.rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              dxhat[c] = g[r * cols + c] * pg.value[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat[r * cols + c];
            }
            mean_d /= static_cast<T>(cols);
            mean_dx /= static_cast<T>(cols);
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

// Row gather: embedding lookup when `table` is an embedding matrix.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<std::size_t> indices) {
  const std::size_t cols = table.cols();
  std::vector<T> out(indices.size() * cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= table.rows()) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " >= " +
                       std::to_string(table.rows()));
    }
    std::copy_n(table.data().data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  const std::size_t n = indices.size();
  return detail::make_result<T>(n, cols, std::move(out), {table},
                                [indices = std::move(indices)](Node<T>& self) {
                                  Node<T>& pt = *self.parents[0];
                                  T* gt = pt.grad_data();
                                  const std::size_t cols = self.cols;
                                  for (std::size_t i = 0; i < indices.size(); ++i)
                                    for (std::size_t c = 0; c < cols; ++c)
                                      gt[indices[i] * cols + c] += self.grad[i * cols + c];
                                });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw IndexError("slice_cols: range out of bounds");
  const std::size_t rows = a.rows(), w = end - begin, cols = a.cols();
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.data().data() + r * cols + begin, w, out.data() + r * w);
  return detail::make_result<T>(rows, w, std::move(out), {a}, [begin, cols](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data();
    for (std::size_t r = 0; r < self.rows; ++r)
      for (std::size_t c = 0; c < self.cols; ++c)
        ga[r * cols + begin + c] += self.grad[r * self.cols + c];
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw IndexError("slice_rows: range out of bounds");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.data().begin() + begin * cols, a.data().begin() + end * cols);
  return detail::make_result<T>(end - begin, cols, std::move(out), {a}, [begin](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data() + begin * self.cols;
    for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  std::vector<T> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * p.cols(), p.cols(), out.data() + r * cols + offset);
    offset += p.cols();
  }
  return detail::make_result<T>(rows, cols, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& pp : self.parents) {
      Node<T>& p = *pp;
      if (p.requires_grad) {
        T* gp = p.grad_data();
        for (std::size_t r = 0; r < self.rows; ++r)
          for (std::size_t c = 0; c < p.cols; ++c)
            gp[r * p.cols + c] += self.grad[r * self.cols + offset + c];
      }
      offset += p.cols;
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<T>(rows, cols, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& pp : self.parents) {
      Node<T>& p = *pp;
      if (p.requires_grad) {
        T* gp = p.grad_data();
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += self.grad[offset + i];
      }
      offset += p.size();
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return detail::make_result<T>(1, 1, {s}, {a}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    T* ga = pa.grad_data();
    for (std::size_t i = 0; i < pa.size(); ++i) ga[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum of 1 x 1 tensors; an empty list yields a constant zero.
template <typename T>
Tensor<T> add_scalars(const std::vector<Tensor<T>>& terms) {
  T s = 0;
  for (const auto& t : terms) {
    if (t.size() != 1) throw ShapeError("add_scalars: non-scalar term");
    s += t.item();
  }
  return detail::make_result<T>(1, 1, {s}, terms, [](Node<T>& self) {
    for (auto& pp : self.parents)
      if (pp->requires_grad) pp->grad_data()[0] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Losses and similarities

// Sum over rows of -log softmax(logits[r])[targets[r]].
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy_rows: one target per row required");
  if (cols < 2) throw InvalidArgument("cross entropy needs at least 2 classes, got " + std::to_string(cols));
  std::vector<T> probs(logits.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw IndexError("cross entropy target " + std::to_string(targets[r]) + " out of range [0, " +
                       std::to_string(cols) + ")");
    }
    const T* x = logits.data().data() + r * cols;
    T* p = probs.data() + r * cols;
    const T m = *std::max_element(x, x + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(x[c] - m);
      z += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    loss += -(x[targets[r]] - m - std::log(z));
  }
  return detail::make_result<T>(1, 1, {loss}, {logits},
                                [probs = std::move(probs), targets](Node<T>& self) {
                                  Node<T>& pl = *self.parents[0];
                                  T* gl = pl.grad_data();
                                  const T g = self.grad[0];
                                  for (std::size_t i = 0; i < probs.size(); ++i) gl[i] += g * probs[i];
                                  for (std::size_t r = 0; r < targets.size(); ++r)
                                    gl[r * pl.cols + targets[r]] -= g;
                                });
}

// -log softmax(logits)[target] for a single 1 x M logit row.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::size_t target) {
  if (logits.rows() != 1) throw ShapeError("softmax_cross_entropy expects a 1 x M logit row");
  return cross_entropy_rows(logits, std::vector<std::size_t>{target});
}

// a.b / max(|a||b|, eps) for two 1 x n rows.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ShapeError("cosine_similarity: length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  T dot = 0, na2 = 0, nb2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.data()[i] * b.data()[i];
    na2 += a.data()[i] * a.data()[i];
    nb2 += b.data()[i] * b.data()[i];
  }
  const T na = std::sqrt(na2), nb = std::sqrt(nb2);
  const bool clamped = na * nb <= eps;
  const T denom = clamped ? eps : na * nb;
  const T s = dot / denom;
  return detail::make_result<T>(1, 1, {s}, {a, b}, [=](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T g = self.grad[0];
    // d s/da = b/denom - s a/|a|^2 (second term only when the norm product
    // is not clamped).
    if (pa.requires_grad) {
      T* ga = pa.grad_data();
      for (std::size_t i = 0; i < pa.size(); ++i) {
        T d = pb.value[i] / denom;
        if (!clamped) d -= s * pa.value[i] / na2;
        ga[i] += g * d;
      }
    }
    if (pb.requires_grad) {
      T* gb = pb.grad_data();
      for (std::size_t i = 0; i < pb.size(); ++i) {
        T d = pa.value[i] / denom;
        if (!clamped) d -= s * pb.value[i] / nb2;
        gb[i] += g * d;
      }
    }
  });
}

// -[y log p + (1-y) log(1-p)] with p clamped into [clamp, 1-clamp].
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& prob, int label, T clamp = T(1e-7)) {
  if (prob.size() != 1) throw ShapeError("binary_cross_entropy expects a scalar probability");
  if (label != 0 && label != 1) throw InvalidArgument("binary label must be 0 or 1");
  const T p = prob.item();
  const T lo = clamp, hi = T(1) - clamp;
  const T pc = std::min(std::max(p, lo), hi);
  const T y = static_cast<T>(label);
  const T loss = -(y * std::log(pc) + (T(1) - y) * std::log(T(1) - pc));
  const bool inside = p > lo && p < hi;
  return detail::make_result<T>(1, 1, {loss}, {prob}, [=](Node<T>& self) {
    if (!inside) return;
    Node<T>& pp = *self.parents[0];
    pp.grad_data()[0] += self.grad[0] * (-y / pc + (T(1) - y) / (T(1) - pc));
  });
}

// Inverted dropout; `keep` holds one Bernoulli draw per element.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, T rate, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != a.size()) throw ShapeError("dropout mask size mismatch");
  const T factor = T(1) / (T(1) - rate);
  std::vector<T> mask(a.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep[i] ? factor : T(0);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a},
                                [mask = std::move(mask)](Node<T>& self) {
                                  Node<T>& pa = *self.parents[0];
                                  T* ga = pa.grad_data();
                                  for (std::size_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * mask[i];
                                });
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace spider::nn
