#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
// Define-by-run: every op builds a node holding its inputs and a backward
// closure; Tensor is a cheap shared handle to a node. Instantiated for float
// (training) and double (gradient checks).

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dualse::ag {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Graph construction can be disabled (inference / detached evaluation).
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  bool prev_;
};

template <typename S>
struct Node {
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same size as value
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents' grads. Receives the node
  // pointer instead of capturing the owning tensor, which would be a cycle.
  std::function<void(Node*)> backprop;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), S(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.data()) x = v;
    return t;
  }

  static Tensor from(std::vector<S> data, Shape shape, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
      throw std::invalid_argument("Tensor::from: data size does not match shape");
    }
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({v}, {1}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int i) const {
    int nd = static_cast<int>(node_->shape.size());
    return node_->shape[(i % nd + nd) % nd];
  }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  // Tensor is a shared handle: a const handle still exposes mutable node
  // storage, mirroring the usual tensor-library convention.
  std::vector<S>& data() const { return node_->value; }
  std::vector<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() const {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: numel != 1");
    return node_->value[0];
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

  // Backpropagates from this scalar tensor. Frees backward closures as it
  // walks the graph so activation memory is reclaimed eagerly.
  void backward(bool release_graph = true) {
    if (numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    std::vector<std::shared_ptr<Node<S>>> order;  // strong refs keep nodes alive mid-walk
    std::unordered_set<Node<S>*> visited;
    topo(node_, visited, order);
    node_->ensure_grad();
    node_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<S>* n = it->get();
      if (n->backprop) {
        n->ensure_grad();
        n->backprop(n);
        if (release_graph) {
          n->backprop = nullptr;
          n->parents.clear();
        }
      }
    }
  }

  // Internal: wire up an op node.
  void attach(std::vector<Tensor> parents, const char* op,
              std::function<void(Node<S>*)> backprop) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    node_->requires_grad = true;
    node_->op = op;
    node_->parents.reserve(parents.size());
    for (auto& p : parents) node_->parents.push_back(p.node());
    node_->backprop = std::move(backprop);
  }

 private:
  static void topo(const std::shared_ptr<Node<S>>& root, std::unordered_set<Node<S>*>& visited,
                   std::vector<std::shared_ptr<Node<S>>>& order) {
    // Iterative DFS: graphs are deep enough to overflow the stack otherwise.
    std::vector<std::pair<std::shared_ptr<Node<S>>, size_t>> stack{{root, 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
      auto& [cur, idx] = stack.back();
      if (idx < cur->parents.size()) {
        const std::shared_ptr<Node<S>>& p = cur->parents[idx++];
        if (p->requires_grad && !visited.count(p.get())) {
          visited.insert(p.get());
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<S>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  out.attach({a, b}, "add", [a, b](Node<S>* self) {
    const auto& g = self->grad;
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  out.attach({a, b}, "sub", [a, b](Node<S>* self) {
    const auto& g = self->grad;
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  out.attach({a, b}, "mul", [a, b](Node<S>* self) {
    const auto& g = self->grad;
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const auto& bv2 = b.data();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const auto& av2 = a.data();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "divide");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  out.attach({a, b}, "divide", [a, b](Node<S>* self) {
    const auto& g = self->grad;
    const auto &av2 = a.data(), &bv2 = b.data();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av2[i] / (bv2[i] * bv2[i]);
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  const S cs = static_cast<S>(c);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * cs;
  out.attach({a}, "mul_scalar", [a, cs](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * cs;
  });
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  const S cs = static_cast<S>(c);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + cs;
  out.attach({a}, "add_scalar", [a](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, -1.0);
}

// x: input value, y: output value in the backward expression.
#define DUALSE_UNARY_OP(NAME, FWD_EXPR, BWD_EXPR)                              \
  template <typename S>                                                        \
  Tensor<S> NAME(const Tensor<S>& a) {                                         \
    Tensor<S> out = Tensor<S>::zeros(a.shape());                               \
    const auto& av = a.data();                                                 \
    auto& ov = out.data();                                                     \
    for (size_t i = 0; i < ov.size(); ++i) {                                   \
      const S x = av[i];                                                       \
      (void)x;                                                                 \
      ov[i] = (FWD_EXPR);                                                      \
    }                                                                          \
    out.attach({a}, #NAME, [a](Node<S>* self) {                                \
      const auto& g = self->grad;                                              \
      const auto& av2 = a.data();                                              \
      const auto& yv = self->value;                                            \
      (void)yv;                                                                \
      auto& ga = a.grad();                                                     \
      for (size_t i = 0; i < g.size(); ++i) {                                  \
        const S x = av2[i];                                                    \
        const S y = yv[i];                                                     \
        (void)x;                                                               \
        (void)y;                                                               \
        ga[i] += g[i] * (BWD_EXPR);                                            \
      }                                                                        \
    });                                                                        \
    return out;                                                                \
  }

DUALSE_UNARY_OP(log, std::log(x), S(1) / x)
DUALSE_UNARY_OP(exp, std::exp(x), y)
DUALSE_UNARY_OP(sqrt_t, std::sqrt(x), S(0.5) / y)
DUALSE_UNARY_OP(square, x* x, S(2) * x)
DUALSE_UNARY_OP(abs_t, std::abs(x), (x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0))))
DUALSE_UNARY_OP(tanh_t, std::tanh(x), S(1) - y * y)

#undef DUALSE_UNARY_OP

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& a, double floor) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  const S f = static_cast<S>(floor);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > f ? av[i] : f;
  out.attach({a}, "clamp_min", [a, f](Node<S>* self) {
    const auto& g = self->grad;
    const auto& av2 = a.data();
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (av2[i] > f) ga[i] += g[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, double slope = 0.1) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  const S sl = static_cast<S>(slope);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] >= S(0) ? av[i] : sl * av[i];
  out.attach({a}, "leaky_relu", [a, sl](Node<S>* self) {
    const auto& g = self->grad;
    const auto& av2 = a.data();
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (av2[i] >= S(0) ? S(1) : sl);
  });
  return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  for (size_t i = 0; i < ov.size(); ++i) {
    const double x = av[i];
    ov[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  out.attach({a}, "gelu", [a](Node<S>* self) {
    const auto& g = self->grad;
    const auto& av2 = a.data();
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const double x = av2[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * static_cast<S>(cdf + x * pdf);
    }
  });
  return out;
}

// Snake activation x + sin^2(alpha*x)/alpha with per-channel alpha.
// x is [B, C, T]; alpha is [C].
template <typename S>
Tensor<S> snake(const Tensor<S>& x, const Tensor<S>& alpha) {
  if (x.ndim() != 3 || alpha.ndim() != 1 || alpha.dim(0) != x.dim(1)) {
    throw std::invalid_argument("snake: expect x [B,C,T], alpha [C]");
  }
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  const auto& av = alpha.data();
  auto& ov = out.data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const S al = av[c];
      const S inv = S(1) / (al + S(1e-9));
      const S* xp = xv.data() + (b * C + c) * T;
      S* op = ov.data() + (b * C + c) * T;
      for (int64_t t = 0; t < T; ++t) {
        const S s = std::sin(al * xp[t]);
        op[t] = xp[t] + inv * s * s;
      }
    }
  }
  out.attach({x, alpha}, "snake", [x, alpha, B, C, T](Node<S>* self) {
    const auto& g = self->grad;
    const auto& xv2 = x.data();
    const auto& av2 = alpha.data();
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t c = 0; c < C; ++c) {
        const S al = av2[c];
        const S inv = S(1) / (al + S(1e-9));
        const S* xp = xv2.data() + (b * C + c) * T;
        const S* gp = g.data() + (b * C + c) * T;
        S gacc = S(0);
        if (x.requires_grad()) {
          S* gxp = x.grad().data() + (b * C + c) * T;
          for (int64_t t = 0; t < T; ++t) {
            const S ax = al * xp[t];
            gxp[t] += gp[t] * (S(1) + std::sin(S(2) * ax));
          }
        }
        if (alpha.requires_grad()) {
          for (int64_t t = 0; t < T; ++t) {
            const S ax = al * xp[t];
            const S s = std::sin(ax);
            // d/dalpha [sin^2(ax)/a] = x*sin(2ax)/a - sin^2(ax)/a^2
            gacc += gp[t] * (xp[t] * std::sin(S(2) * ax) * inv - s * s * inv * inv);
          }
          alpha.grad()[c] += gacc;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  // One dim may be -1 (inferred).
  int64_t known = 1, minus = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (minus >= 0) throw std::invalid_argument("reshape: multiple -1 dims");
      minus = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (minus >= 0) shape[minus] = a.numel() / known;
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(shape));
  }
  Tensor<S> out = Tensor<S>::from(a.data(), std::move(shape));
  out.attach({a}, "reshape", [a](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& axes) {
  const int nd = a.ndim();
  if (static_cast<int>(axes.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = a.shape()[axes[i]];
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  std::vector<int64_t> in_strides(nd, 1), out_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
  for (int i = nd - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

  const auto& av = a.data();
  auto& ov = out.data();
  const int64_t n = a.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat;
    int64_t src = 0;
    for (int i = 0; i < nd; ++i) {
      const int64_t q = rem / out_strides[i];
      rem -= q * out_strides[i];
      src += q * in_strides[axes[i]];
    }
    ov[flat] = av[src];
  }
  out.attach({a}, "permute", [a, axes, in_strides, out_strides, nd](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    const int64_t n2 = static_cast<int64_t>(g.size());
    for (int64_t flat = 0; flat < n2; ++flat) {
      int64_t rem = flat;
      int64_t src = 0;
      for (int i = 0; i < nd; ++i) {
        const int64_t q = rem / out_strides[i];
        rem -= q * out_strides[i];
        src += q * in_strides[axes[i]];
      }
      ga[src] += g[flat];
    }
  });
  return out;
}

// Slice along one dimension: out = a[..., start:start+len, ...].
template <typename S>
Tensor<S> slice(const Tensor<S>& a, int dim, int64_t start, int64_t len) {
  const int nd = a.ndim();
  if (dim < 0) dim += nd;
  if (dim < 0 || dim >= nd || start < 0 || start + len > a.shape()[dim]) {
    throw std::invalid_argument("slice: out of range");
  }
  Shape out_shape = a.shape();
  out_shape[dim] = len;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= a.shape()[i];
  for (int i = dim + 1; i < nd; ++i) inner *= a.shape()[i];
  const int64_t d_in = a.shape()[dim];

  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    const S* src = av.data() + (o * d_in + start) * inner;
    S* dst = ov.data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  out.attach({a}, "slice", [a, outer, inner, d_in, start, len](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    for (int64_t o = 0; o < outer; ++o) {
      const S* src = g.data() + o * len * inner;
      S* dst = ga.data() + (o * d_in + start) * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int dim) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  const int nd = parts[0].ndim();
  if (dim < 0) dim += nd;
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    total += p.shape()[dim];
  }
  out_shape[dim] = total;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= out_shape[i];
  for (int i = dim + 1; i < nd; ++i) inner *= out_shape[i];

  auto& ov = out.data();
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t d = p.shape()[dim];
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * d * inner, pv.data() + (o * d + d) * inner,
                ov.data() + (o * total + offset) * inner);
    }
    offset += d;
  }
  std::vector<Tensor<S>> parents = parts;
  out.attach(parents, "concat", [parents, outer, inner, total, dim](Node<S>* self) {
    const auto& g = self->grad;
    int64_t off = 0;
    for (auto& p : parents) {
      const int64_t d = p.shape()[dim];
      if (p.requires_grad()) {
        auto& gp = p.grad();
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = g.data() + (o * total + off) * inner;
          S* dst = gp.data() + o * d * inner;
          for (int64_t i = 0; i < d * inner; ++i) dst[i] += src[i];
        }
      }
      off += d;
    }
  });
  return out;
}

template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>::from(a.data(), a.shape(), false);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  out.attach({a}, "sum_all", [a](Node<S>* self) {
    const S g = self->grad[0];
    auto& ga = a.grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  const int64_t n = a.numel();
  S acc = S(0);
  for (S v : a.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  out.attach({a}, "mean_all", [a, n](Node<S>* self) {
    const S g = self->grad[0] / static_cast<S>(n);
    auto& ga = a.grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

// Sum over the last dimension: [..., T] -> [...].
template <typename S>
Tensor<S> sum_lastdim(const Tensor<S>& a) {
  const int nd = a.ndim();
  if (nd < 1) throw std::invalid_argument("sum_lastdim: rank 0");
  const int64_t t = a.shape()[nd - 1];
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t r = 0; r < ov.size(); ++r) {
    S acc = S(0);
    const S* p = av.data() + r * t;
    for (int64_t i = 0; i < t; ++i) acc += p[i];
    ov[r] = acc;
  }
  out.attach({a}, "sum_lastdim", [a, t](Node<S>* self) {
    const auto& g = self->grad;
    auto& ga = a.grad();
    for (size_t r = 0; r < g.size(); ++r) {
      S* p = ga.data() + r * t;
      for (int64_t i = 0; i < t; ++i) p[i] += g[r];
    }
  });
  return out;
}

// Scales each row of x [R, T] by s [R] (used for per-sample scalar weights).
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.ndim() < 2 || s.numel() != shape_numel(Shape(x.shape().begin(), x.shape().end() - 1))) {
    throw std::invalid_argument("scale_rows: s must match x's leading dims");
  }
  const int64_t t = x.shape()[x.ndim() - 1];
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  const auto& sv = s.data();
  auto& ov = out.data();
  for (size_t r = 0; r < sv.size(); ++r) {
    const S c = sv[r];
    const S* xp = xv.data() + r * t;
    S* op = ov.data() + r * t;
    for (int64_t i = 0; i < t; ++i) op[i] = c * xp[i];
  }
  out.attach({x, s}, "scale_rows", [x, s, t](Node<S>* self) {
    const auto& g = self->grad;
    const auto& xv2 = x.data();
    const auto& sv2 = s.data();
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (size_t r = 0; r < sv2.size(); ++r) {
        const S c = sv2[r];
        const S* gp = g.data() + r * t;
        S* xp = gx.data() + r * t;
        for (int64_t i = 0; i < t; ++i) xp[i] += c * gp[i];
      }
    }
    if (s.requires_grad()) {
      auto& gs = s.grad();
      for (size_t r = 0; r < sv2.size(); ++r) {
        const S* gp = g.data() + r * t;
        const S* xp = xv2.data() + r * t;
        S acc = S(0);
        for (int64_t i = 0; i < t; ++i) acc += gp[i] * xp[i];
        gs[r] += acc;
      }
    }
  });
  return out;
}

// Adds a row vector b [D] to every row of x [N, D].
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  const int64_t d = x.shape()[x.ndim() - 1];
  if (b.numel() != d) throw std::invalid_argument("add_rowvec: width mismatch");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  const int64_t rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    const S* xp = xv.data() + r * d;
    S* op = ov.data() + r * d;
    for (int64_t i = 0; i < d; ++i) op[i] = xp[i] + bv[i];
  }
  out.attach({x, b}, "add_rowvec", [x, b, rows, d](Node<S>* self) {
    const auto& g = self->grad;
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gp = g.data() + r * d;
        for (int64_t i = 0; i < d; ++i) gb[i] += gp[i];
      }
    }
  });
  return out;
}

}  // namespace dualse::ag
