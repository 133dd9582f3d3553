#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a node in a computation trace. Operations on
// tensors that require gradients record their inputs and a backward rule;
// backward() walks the trace in reverse topological order and accumulates
// gradients into every leaf that requires them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <type_traits>
#include <utility>

#include <vector>

namespace pfl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline thread_local bool grad_mode_enabled = true;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::size_t backward_visits = 0;

  bool is_leaf() const { return parents.empty() && !backward_fn; }

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables trace recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() : node_(std::make_shared<NodeT>()) { node_->shape = {}; node_->data = {T(0)}; }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }
  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
  }
  std::span<T> grad() {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
    return node_->data[0];
  }

  /// Copy of the values with no trace attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), false);
  }

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode_enabled) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Builds the output node. Parents and the backward rule are only attached
/// when some input participates in differentiation.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (any_requires_grad<T>(inputs)) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    for (const auto* t : inputs) node.parents.push_back(t->node());
    node.backward_fn = std::move(backward);
  }
  return out;
}

inline void check_axis(std::size_t axis, std::size_t rank) {
  if (axis >= rank)
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(rank));
}

// ---------------------------------------------------------------------------
// Broadcasting (trailing dimensions aligned, extent-1 dimensions stretch).

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> aligned_strides(const Shape& in, std::size_t rank) {
  std::vector<std::size_t> strides(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t src = in.size() - 1 - k;
    std::size_t dst = rank - 1 - k;
    strides[dst] = in[src] == 1 ? 0 : s;
    s *= in[src];
  }
  return strides;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    out[rank - 1 - k] = ea == 1 ? eb : ea;
  }
  return {out, aligned_strides(a, rank), aligned_strides(b, rank)};
}

/// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t rank = plan.out.size();
  const std::size_t total = numel_of(plan.out);
  if (total == 0) return;
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = plan.out[rank - 1];
  const std::size_t sa = plan.stride_a[rank - 1];
  const std::size_t sb = plan.stride_b[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, base_a + j * sa, base_b + j * sb);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      base_a += plan.stride_a[d];
      base_b += plan.stride_b[d];
      if (counter[d] < plan.out[d]) break;
      base_a -= plan.stride_a[d] * counter[d];
      base_b -= plan.stride_b[d] * counter[d];
      counter[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel_of(plan.out));
  auto av = a.data();
  auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(av[ia], bv[ib]); });
  }
  auto na = a.node();
  auto nb = b.node();
  return make_result<T>(name, plan.out, std::move(out), {&a, &b}, [na, nb, plan, da, db](Node<T>& self) {
    const auto& g = self.grad;
    const auto& y = self.data;
    const auto& x1 = na->data;
    const auto& x2 = nb->data;
    T* ga = na->requires_grad ? na->grad_buffer().data() : nullptr;
    T* gb = nb->requires_grad ? nb->grad_buffer().data() : nullptr;
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * da(x1[ia], x2[ib], y[o]);
      if (gb) gb[ib] += g[o] * db(x1[ia], x2[ib], y[o]);
    });
  });
}

template <typename T, typename Fwd, typename D>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, D deriv) {
  const auto& av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto na = a.node();
  return make_result<T>(name, a.shape(), std::move(out), {&a}, [na, deriv](Node<T>& self) {
    auto& ga = na->grad_buffer();
    const auto& x = na->data;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data())
    if (v == T(0)) throw std::domain_error("div: division by zero");
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v > T(0))) throw std::domain_error("log: input must be positive");
  return detail::unary_op<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v >= T(0))) throw std::domain_error("sqrt: input must be nonnegative");
  return detail::unary_op<T>("sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) {
    if (y == T(0)) throw std::domain_error("sqrt: gradient undefined at 0");
    return T(0.5) / y;
  });
}

/// Clamps to [lo, hi]; the gradient is passed through strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return detail::unary_op<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  // float tanhf is several times slower than expf; the exp form is accurate to a few ulp in float
  auto fwd = [](T x) {
    if constexpr (std::is_same_v<T, float>)
      return T(2) / (T(1) + std::exp(T(-2) * x)) - T(1);
    else
      return std::tanh(x);
  };
  return detail::unary_op<T>("tanh", a, fwd, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

/// x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "swish", a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op<T>("mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  auto na = a.node();
  return detail::make_result<T>("reshape", std::move(shape), a.values(), {&a}, [na](detail::Node<T>& self) {
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto na = a.node();
  return detail::make_result<T>("transpose", Shape{c, r}, std::move(out), {&a}, [na, r, c](detail::Node<T>& self) {
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

/// Concatenates along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  if (parts[0].rank() == 0) throw ShapeError("concat: scalars cannot be concatenated");
  std::size_t rows = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.rank() == 0 || pt != tail) throw ShapeError("concat: mismatched trailing extents " + to_string(p.shape()));
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor<T> result(shape, std::move(out), false);
  bool track = false;
  if (detail::grad_mode_enabled)
    for (const auto& p : parts) track = track || p.requires_grad();
  if (track) {
    auto& node = *result.node();
    node.requires_grad = true;
    node.op = "concat";
    for (const auto& p : parts) node.parents.push_back(p.node());
    node.backward_fn = [](detail::Node<T>& self) {
      std::size_t offset = 0;
      for (auto& parent : self.parents) {
        std::size_t n = parent->data.size();
        if (parent->requires_grad) {
          auto& g = parent->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  }
  return result;
}

/// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) throw std::out_of_range("slice_rows: bad range");
  std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  auto na = a.node();
  return detail::make_result<T>("slice_rows", shape, std::move(out), {&a}, [na, begin, row](detail::Node<T>& self) {
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[begin * row + i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects matrices, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  auto na = a.node();
  auto nb = b.node();
  return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](detail::Node<T>& self) {
    const T* G = self.grad.data();
    if (na->requires_grad) {
      // dA = G * B^T
      T* GA = na->grad_buffer().data();
      const T* Bv = nb->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bv[p * n + j];
          GA[i * k + p] += acc;
        }
    }
    if (nb->requires_grad) {
      // dB = A^T * G
      T* GB = nb->grad_buffer().data();
      const T* Av = na->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T s = Av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += s * G[i * n + j];
        }
    }
  });
}

enum class Padding { same, valid };

/// Dilated 1-D cross-correlation of x [in x length] with kernels [out x in x width].
/// "same" padding keeps the length for any dilation; zeros are implied outside.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t dilation = 1,
                 Padding padding = Padding::same) {
  if (x.rank() != 2) throw ShapeError("conv1d input must be [channels x length], got " + to_string(x.shape()));
  if (kernels.rank() != 3) throw ShapeError("conv1d kernels must be [out x in x width], got " + to_string(kernels.shape()));
  if (dilation == 0) throw std::invalid_argument("conv1d: dilation must be positive");
  const std::size_t cin = x.dim(0), len = x.dim(1);
  const std::size_t cout = kernels.dim(0), width = kernels.dim(2);
  if (kernels.dim(1) != cin)
    throw ShapeError("conv1d channel mismatch: input has " + std::to_string(cin) + " channels, kernels expect " +
                     std::to_string(kernels.dim(1)));
  const std::size_t span = dilation * (width - 1);
  std::ptrdiff_t pad = 0;
  std::size_t out_len = 0;
  if (padding == Padding::same) {
    pad = static_cast<std::ptrdiff_t>(span / 2);
    out_len = len;
  } else {
    if (len < span + 1) throw ShapeError("conv1d: input shorter than the dilated kernel");
    out_len = len - span;
  }
  // out[o][t] = sum_i sum_k w[o][i][k] * x[i][t + k*d - pad]
  auto valid_range = [=](std::size_t k) {
    std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k * dilation) - pad;
    std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                                                 static_cast<std::ptrdiff_t>(len) - shift);
    return std::tuple<std::ptrdiff_t, std::ptrdiff_t, std::ptrdiff_t>{shift, lo, hi};
  };
  std::vector<T> out(cout * out_len, T(0));
  const T* X = x.data().data();
  const T* W = kernels.data().data();
  // Time is tiled so that the rows touched by one tile stay in cache.
  constexpr std::ptrdiff_t kTile = 512;
  for (std::ptrdiff_t t0 = 0; t0 < static_cast<std::ptrdiff_t>(out_len); t0 += kTile) {
    const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(t0 + kTile, static_cast<std::ptrdiff_t>(out_len));
    for (std::size_t o = 0; o < cout; ++o) {
      T* __restrict orow = out.data() + o * out_len;
      for (std::size_t i = 0; i < cin; ++i) {
        const T* __restrict xrow = X + i * len;
        for (std::size_t k = 0; k < width; ++k) {
          const T w = W[(o * cin + i) * width + k];
          auto [shift, lo, hi] = valid_range(k);
          const std::ptrdiff_t a = std::max(lo, t0), b = std::min(hi, t1);
          for (std::ptrdiff_t t = a; t < b; ++t) orow[t] += w * xrow[t + shift];
        }
      }
    }
  }
  auto nx = x.node();
  auto nk = kernels.node();
  return detail::make_result<T>(
      "conv1d", Shape{cout, out_len}, std::move(out), {&x, &kernels},
      [nx, nk, cin, cout, len, width, out_len, valid_range](detail::Node<T>& self) {
        const T* G = self.grad.data();
        const T* Xv = nx->data.data();
        const T* Wv = nk->data.data();
        T* GX = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
        T* GW = nk->requires_grad ? nk->grad_buffer().data() : nullptr;
        constexpr std::ptrdiff_t kTile = 512;
        for (std::ptrdiff_t t0 = 0; t0 < static_cast<std::ptrdiff_t>(out_len); t0 += kTile) {
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(t0 + kTile, static_cast<std::ptrdiff_t>(out_len));
          for (std::size_t o = 0; o < cout; ++o) {
            const T* __restrict grow = G + o * out_len;
            for (std::size_t i = 0; i < cin; ++i) {
              for (std::size_t k = 0; k < width; ++k) {
                auto [shift, lo, hi] = valid_range(k);
                const std::ptrdiff_t a = std::max(lo, t0), b = std::min(hi, t1);
                const std::size_t widx = (o * cin + i) * width + k;
                if (GX) {
                  const T w = Wv[widx];
                  T* __restrict gxrow = GX + i * len;
                  for (std::ptrdiff_t t = a; t < b; ++t) gxrow[t + shift] += w * grow[t];
                }
                if (GW) {
                  const T* __restrict xrow = Xv + i * len;
                  T acc = 0;
                  for (std::ptrdiff_t t = a; t < b; ++t) acc += grow[t] * xrow[t + shift];
                  GW[widx] += acc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions.

enum class Reduce { sum, mean, max, logsumexp };

namespace detail {

struct AxisView {
  std::size_t outer, n, inner;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  check_axis(axis, shape.size());
  AxisView v{1, shape[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) v.outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) v.inner *= shape[d];
  return v;
}

}  // namespace detail

/// Reduction over one axis. max routes the gradient to the first maximal index.
template <typename T>
Tensor<T> reduce(Reduce op, const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  auto v = detail::axis_view(x.shape(), axis);
  if (v.n == 0) throw ShapeError("reduce over an empty axis");
  Shape shape = x.shape();
  if (keepdim) shape[axis] = 1;
  else shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(v.outer * v.inner);
  std::vector<std::size_t> argmax;
  if (op == Reduce::max) argmax.resize(out.size());
  auto xv = x.data();
  for (std::size_t a = 0; a < v.outer; ++a)
    for (std::size_t c = 0; c < v.inner; ++c) {
      auto at = [&](std::size_t j) { return xv[(a * v.n + j) * v.inner + c]; };
      const std::size_t oi = a * v.inner + c;
      switch (op) {
        case Reduce::sum:
        case Reduce::mean: {
          T acc = 0;
          for (std::size_t j = 0; j < v.n; ++j) acc += at(j);
          out[oi] = op == Reduce::mean ? acc / static_cast<T>(v.n) : acc;
          break;
        }
        case Reduce::max: {
          std::size_t best = 0;
          for (std::size_t j = 1; j < v.n; ++j)
            if (at(j) > at(best)) best = j;
          argmax[oi] = best;
          out[oi] = at(best);
          break;
        }
        case Reduce::logsumexp: {
          T m = at(0);
          for (std::size_t j = 1; j < v.n; ++j) m = std::max(m, at(j));
          T acc = 0;
          for (std::size_t j = 0; j < v.n; ++j) acc += std::exp(at(j) - m);
          out[oi] = m + std::log(acc);
          break;
        }
      }
    }
  static constexpr const char* names[] = {"sum", "mean", "max", "logsumexp"};
  auto nx = x.node();
  return detail::make_result<T>(
      names[static_cast<int>(op)], std::move(shape), std::move(out), {&x},
      [nx, op, v, argmax = std::move(argmax)](detail::Node<T>& self) {
        auto& gx = nx->grad_buffer();
        const auto& xd = nx->data;
        for (std::size_t a = 0; a < v.outer; ++a)
          for (std::size_t c = 0; c < v.inner; ++c) {
            const std::size_t oi = a * v.inner + c;
            const T g = self.grad[oi];
            auto idx = [&](std::size_t j) { return (a * v.n + j) * v.inner + c; };
            switch (op) {
              case Reduce::sum:
                for (std::size_t j = 0; j < v.n; ++j) gx[idx(j)] += g;
                break;
              case Reduce::mean:
                for (std::size_t j = 0; j < v.n; ++j) gx[idx(j)] += g / static_cast<T>(v.n);
                break;
              case Reduce::max:
                gx[idx(argmax[oi])] += g;
                break;
              case Reduce::logsumexp:
                for (std::size_t j = 0; j < v.n; ++j) gx[idx(j)] += g * std::exp(xd[idx(j)] - self.data[oi]);
                break;
            }
          }
      });
}

template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false) { return reduce(Reduce::sum, x, axis, keepdim); }
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false) { return reduce(Reduce::mean, x, axis, keepdim); }
template <typename T> Tensor<T> max(const Tensor<T>& x, std::size_t axis, bool keepdim = false) { return reduce(Reduce::max, x, axis, keepdim); }
template <typename T> Tensor<T> logsumexp(const Tensor<T>& x, std::size_t axis, bool keepdim = false) { return reduce(Reduce::logsumexp, x, axis, keepdim); }

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce(Reduce::sum, reshape(x, Shape{x.numel()}), 0);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return reduce(Reduce::mean, reshape(x, Shape{x.numel()}), 0);
}

// ---------------------------------------------------------------------------
// Signal helpers used by the audio front end and the denoiser.

/// Overlapping frames of a 1-D signal: [num_frames x width], num_frames = floor((len - width)/hop) + 1.
template <typename T>
Tensor<T> frames(const Tensor<T>& x, std::size_t width, std::size_t hop) {
  if (x.rank() != 1) throw ShapeError("frames expects a 1-D signal, got " + to_string(x.shape()));
  if (width == 0 || hop == 0) throw std::invalid_argument("frames: width and hop must be positive");
  const std::size_t len = x.dim(0);
  if (len < width) throw ShapeError("frames: signal shorter than one frame");
  const std::size_t count = (len - width) / hop + 1;
  std::vector<T> out(count * width);
  auto xv = x.data();
  for (std::size_t f = 0; f < count; ++f)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(f * hop), width, out.begin() + static_cast<std::ptrdiff_t>(f * width));
  auto nx = x.node();
  return detail::make_result<T>("frames", Shape{count, width}, std::move(out), {&x}, [nx, count, width, hop](detail::Node<T>& self) {
    auto& gx = nx->grad_buffer();
    for (std::size_t f = 0; f < count; ++f)
      for (std::size_t j = 0; j < width; ++j) gx[f * hop + j] += self.grad[f * width + j];
  });
}

/// Linear interpolation of [channels x frames] onto out_len positions, where
/// position n reads frame coordinate (n - offset) / step clamped to [0, frames-1].
template <typename T>
Tensor<T> upsample_linear(const Tensor<T>& x, std::size_t out_len, double offset, double step) {
  if (x.rank() != 2) throw ShapeError("upsample_linear expects [channels x frames]");
  if (step <= 0) throw std::invalid_argument("upsample_linear: step must be positive");
  const std::size_t channels = x.dim(0), nf = x.dim(1);
  if (nf == 0) throw ShapeError("upsample_linear: no frames");
  std::vector<std::size_t> lo(out_len);
  std::vector<T> frac(out_len);
  for (std::size_t n = 0; n < out_len; ++n) {
    double u = std::clamp((static_cast<double>(n) - offset) / step, 0.0, static_cast<double>(nf - 1));
    auto i0 = static_cast<std::size_t>(std::floor(u));
    if (i0 >= nf - 1) i0 = nf > 1 ? nf - 2 : 0;
    lo[n] = i0;
    frac[n] = nf > 1 ? static_cast<T>(u - static_cast<double>(i0)) : T(0);
  }
  std::vector<T> out(channels * out_len);
  auto xv = x.data();
  for (std::size_t c = 0; c < channels; ++c) {
    const T* row = xv.data() + c * nf;
    for (std::size_t n = 0; n < out_len; ++n) {
      T a = row[lo[n]];
      T b = nf > 1 ? row[lo[n] + 1] : a;
      out[c * out_len + n] = a + frac[n] * (b - a);
    }
  }
  auto nx = x.node();
  return detail::make_result<T>("upsample_linear", Shape{channels, out_len}, std::move(out), {&x},
                                [nx, channels, nf, out_len, lo = std::move(lo), frac = std::move(frac)](detail::Node<T>& self) {
                                  auto& gx = nx->grad_buffer();
                                  for (std::size_t c = 0; c < channels; ++c)
                                    for (std::size_t n = 0; n < out_len; ++n) {
                                      const T g = self.grad[c * out_len + n];
                                      gx[c * nf + lo[n]] += g * (T(1) - frac[n]);
                                      if (nf > 1) gx[c * nf + lo[n] + 1] += g * frac[n];
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Backward pass.

/// Nodes reachable from root, parents before children.
template <typename T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<detail::Node<T>*> order;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Names of the recorded (non-leaf) operations in execution order.
template <typename T>
std::vector<std::string> trace(const Tensor<T>& root) {
  std::vector<std::string> ops;
  for (auto* node : topological_order(root))
    if (node->backward_fn) ops.emplace_back(node->op);
  return ops;
}

/// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
/// Unless retain_trace is set, the trace is released afterwards.
template <typename T>
void backward(Tensor<T>& loss, bool retain_trace = false) {
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  auto order = topological_order(loss);
  for (auto* node : order)
    if (node->backward_fn) node->grad.assign(node->data.size(), T(0));
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->backward_fn) continue;
    node->backward_fn(*node);
    ++node->backward_visits;
  }
  if (!retain_trace) {
    for (auto* node : order) {
      if (!node->backward_fn) continue;
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.clear();
    }
  }
}

/// Visit counts of recorded ops from the last backward passes, in trace order.
template <typename T>
std::vector<std::size_t> backward_visit_counts(const Tensor<T>& root) {
  std::vector<std::size_t> counts;
  for (auto* node : topological_order(root))
    if (node->backward_fn) counts.push_back(node->backward_visits);
  return counts;
}

}  // namespace pfl
