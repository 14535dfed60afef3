#pragma once

// Dense 2-D tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a fresh Tensor. When gradients are enabled and any input
// is tracked, the result records its parents and a backward closure; the
// graph lives exactly as long as the handles that reference it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sslrul/error.hpp"
#include "sslrul/rng.hpp"

namespace sslrul {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const { return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")"; }
};

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape.str());
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(shape, std::vector<double>(shape.size(), 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({1, 1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape().str() + " is not a scalar");
    return node_->value[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Zeros when no gradient has been accumulated.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(node_->value.size(), 0.0);
  }
  void zero_grad() { node_->grad.clear(); }
  const char* op() const { return node_->op; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(const char*, Shape, std::vector<double>, std::vector<Tensor>, std::function<void(detail::Node&)>);
};

// Builds an op result; the closure is dropped when nothing upstream is tracked.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->op = op;
  n->shape = shape;
  n->value = std::move(values);
  bool tracked = false;
  if (detail::grad_mode())
    for (const auto& t : inputs) tracked = tracked || t.requires_grad();
  if (tracked) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.handle());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(std::vector<double>& v, Shape s) {
  return MapMat(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}
inline ConstMapMat as_mat(const std::vector<double>& v, Shape s) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch " + a.shape().str() + " x " + b.shape().str());
  const Shape out{a.rows(), b.cols()};
  std::vector<double> v(out.size());
  detail::as_mat(v, out).noalias() = detail::as_mat(a.values(), a.shape()) * detail::as_mat(b.values(), b.shape());
  return make_op("matmul", out, std::move(v), {a, b}, [](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    const auto G = detail::as_mat(self.grad, self.shape);
    if (A.requires_grad)
      detail::as_mat(A.ensure_grad(), A.shape).noalias() += G * detail::as_mat(B.value, B.shape).transpose();
    if (B.requires_grad)
      detail::as_mat(B.ensure_grad(), B.shape).noalias() += detail::as_mat(A.value, A.shape).transpose() * G;
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  return make_op("add", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& P = detail::parent(self, p);
      if (!P.requires_grad) continue;
      auto& g = P.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  return make_op("sub", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  return make_op("mul", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> v(a.values());
  for (double& x : v) x *= k;
  return make_op("scale", a.shape(), std::move(v), {a}, [k](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * self.grad[i];
  });
}

// a (m x n) + bias (1 x n) broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ShapeError("add_bias: shape mismatch " + a.shape().str() + " + " + bias.shape().str());
  std::vector<double> v(a.values());
  const auto& bv = bias.values();
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) v[r * n + c] += bv[c];
  return make_op("add_bias", a.shape(), std::move(v), {a, bias}, [](detail::Node& self) {
    auto& A = detail::parent(self, 0);
    auto& B = detail::parent(self, 1);
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      const std::size_t n = self.shape.cols;
      for (std::size_t r = 0; r < self.shape.rows; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.values());
  for (double& x : v) x = 1.0 / (1.0 + std::exp(-x));
  return make_op("sigmoid", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.values());
  for (double& x : v) x = std::tanh(x);
  return make_op("tanh", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = self.value[i];
      g[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

// axis 0 stacks rows (equal cols), axis 1 stacks columns (equal rows).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Shape out = parts[0].shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (axis == 0) {
      if (s.cols != out.cols)
        throw ShapeError("concat: shape mismatch " + parts[0].shape().str() + " vs " + s.str() + " on axis 0");
      out.rows += s.rows;
    } else {
      if (s.rows != out.rows)
        throw ShapeError("concat: shape mismatch " + parts[0].shape().str() + " vs " + s.str() + " on axis 1");
      out.cols += s.cols;
    }
  }
  std::vector<double> v;
  v.reserve(out.size());
  if (axis == 0) {
    for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  } else {
    v.resize(out.size());
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.cols();
      for (std::size_t r = 0; r < out.rows; ++r)
        std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                    v.begin() + static_cast<std::ptrdiff_t>(r * out.cols + offset));
      offset += w;
    }
  }
  return make_op("concat", out, std::move(v), parts, [axis](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& pp : self.parents) {
      auto& P = *pp;
      if (axis == 0) {
        if (P.requires_grad) {
          auto& g = P.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
        }
        offset += P.value.size();
      } else {
        const std::size_t w = P.shape.cols;
        if (P.requires_grad) {
          auto& g = P.ensure_grad();
          for (std::size_t r = 0; r < P.shape.rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * self.shape.cols + offset + c];
        }
        offset += w;
      }
    }
  });
}

// `len` rows (axis 0) or columns (axis 1) starting at `start`.
inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  if (start + len > extent || len == 0)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for shape " + a.shape().str() + " on axis " + std::to_string(axis));
  const Shape out = axis == 0 ? Shape{len, a.cols()} : Shape{a.rows(), len};
  std::vector<double> v(out.size());
  const auto& av = a.values();
  if (axis == 0) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(start * a.cols()), out.size(), v.begin());
  } else {
    for (std::size_t r = 0; r < out.rows; ++r)
      std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * a.cols() + start), len,
                  v.begin() + static_cast<std::ptrdiff_t>(r * len));
  }
  return make_op("slice", out, std::move(v), {a}, [axis, start](detail::Node& self) {
    auto& P = detail::parent(self, 0);
    auto& g = P.ensure_grad();
    if (axis == 0) {
      const std::size_t base = start * P.shape.cols;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[base + i] += self.grad[i];
    } else {
      const std::size_t len = self.shape.cols;
      for (std::size_t r = 0; r < self.shape.rows; ++r)
        for (std::size_t c = 0; c < len; ++c) g[r * P.shape.cols + start + c] += self.grad[r * len + c];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op("sum", {1, 1}, {s}, {a}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (double& x : g) x += self.grad[0];
  });
}

// Mean over all elements of (pred - target)^2.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
  detail::require_same("mse", pred, target);
  const auto& p = pred.values();
  const auto& t = target.values();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    s += d * d;
  }
  const double n = static_cast<double>(p.size());
  return make_op("mse", {1, 1}, {s / n}, {pred, target}, [n](detail::Node& self) {
    auto& P = detail::parent(self, 0);
    auto& T = detail::parent(self, 1);
    const double k = 2.0 * self.grad[0] / n;
    if (P.requires_grad) {
      auto& g = P.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (P.value[i] - T.value[i]);
    }
    if (T.requires_grad) {
      auto& g = T.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (P.value[i] - T.value[i]);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row (x - mean) / sqrt(var + eps); no learned scale or shift.
inline Tensor layer_norm(const Tensor& a, double eps = kLayerNormEps) {
  const std::size_t n = a.cols();
  const std::size_t m = a.rows();
  std::vector<double> v(a.size());
  std::vector<double> inv_std(m);
  const auto& x = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) v[r * n + c] = (row[c] - mean) * is;
  }
  return make_op("layer_norm", a.shape(), std::move(v), {a}, [inv_std = std::move(inv_std)](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    const std::size_t n = self.shape.cols;
    const double dn = static_cast<double>(n);
    for (std::size_t r = 0; r < self.shape.rows; ++r) {
      const double* dy = self.grad.data() + r * n;
      const double* y = self.value.data() + r * n;
      double mean_dy = 0.0;
      double mean_dy_y = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        mean_dy += dy[c];
        mean_dy_y += dy[c] * y[c];
      }
      mean_dy /= dn;
      mean_dy_y /= dn;
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += inv_std[r] * (dy[c] - mean_dy - y[c] * mean_dy_y);
    }
  });
}

// Inverted dropout: zero with probability p, scale survivors by 1 / (1 - p).
// Identity when not training or p == 0.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ShapeError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const double k = 1.0 / (1.0 - p);
  std::vector<double> mask(a.size());
  for (double& m : mask) m = keep(rng) ? k : 0.0;
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= mask[i];
  return make_op("dropout", a.shape(), std::move(v), {a}, [mask = std::move(mask)](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// Accumulates d(loss)/d(x) into every tracked leaf reachable from `loss`.
// A given loss can be differentiated once.
inline void backward(Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw TrainingError("backward: loss must be a scalar tensor");
  detail::Node* root = loss.node();
  if (!root->requires_grad) throw TrainingError("backward: loss is not connected to any tracked tensor");
  if (root->backward_done) throw TrainingError("backward: graph already differentiated; rebuild it first");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
    // Interior gradients are no longer needed once propagated.
    if (n != root && n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  root->backward_done = true;
}

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one entry per parameter block
  double worst = 0.0;
  bool passed = true;
};

// Central finite differences against the analytic gradient. The relative
// error is |a - n| / max(|a|, |n|, floor), so near-zero gradients are
// compared absolutely at the floor scale.
inline GradCheckReport gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                      double eps = 1e-5, double tol = 1e-4, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  GradCheckReport report;
  for (auto& p : params) {
    const std::vector<double> analytic = p.grad();
    double worst = 0.0;
    auto& vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      double fp = 0.0;
      double fm = 0.0;
      {
        NoGradGuard ng;
        vals[i] = orig + eps;
        fp = f().item();
        vals[i] = orig - eps;
        fm = f().item();
      }
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.passed = report.worst < tol;
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace sslrul
