#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "suede/errors.hpp"
#include "suede/rng.hpp"

namespace suede {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<Index> row_major_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Right-aligned broadcast of two shapes; each aligned dim must match or be 1.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    Index da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    Index db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    require(da == db || da == 1 || db == 1, ErrorCode::kDimension,
            "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for reading a tensor of shape `from` at indices of the broadcast
// shape `to`: broadcast dims get stride 0.
inline std::vector<Index> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<Index> natural = row_major_strides(from);
  std::vector<Index> st(to.size(), 0);
  std::size_t off = to.size() - from.size();
  for (std::size_t i = 0; i < from.size(); ++i)
    st[off + i] = from[i] == 1 ? 0 : natural[i];
  return st;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first needed; same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls grad of this node into parents

  Index numel() const { return static_cast<Index>(values.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording within a scope (inference, finite differencing).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense f64 tensor handle participating in a reverse-mode graph. Copying a
// Tensor copies the handle, not the storage; values are treated as immutable
// once produced by an op. Parameters are leaves with requires_grad set.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false) {
    require(numel_of(shape) == static_cast<Index>(values.size()),
            ErrorCode::kDimension,
            "data length " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)), 0.0);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)), value);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  // Truncated-normal init, std `stddev`, used for all weight matrices.
  static Tensor randn_trunc(Shape shape, double stddev, Rng& rng,
                            bool requires_grad = true) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
    for (double& x : v) x = rng.truncated_normal(stddev);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  Index ndim() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->numel(); }
  Index dim(Index i) const {
    if (i < 0) i += ndim();
    return node_->shape[static_cast<std::size_t>(i)];
  }

  const std::vector<double>& data() const { return node_->values; }
  std::vector<double>& mutable_data() { return node_->values; }

  double item() const {
    require(numel() == 1, ErrorCode::kContract,
            "item() requires a scalar, got shape " + shape_str(shape()));
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    const_cast<detail::Node*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  std::vector<double>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Detached copy of the values (leaf, no history).
  Tensor detach(bool requires_grad = false) const {
    return from_data(shape(), data(), requires_grad);
  }

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // requires_grad node reachable from this one; call zero_grad between
  // backward passes unless accumulation is wanted.
  void backward() const {
    require(numel() == 1, ErrorCode::kContract,
            "backward() requires a scalar loss, got shape " +
                shape_str(shape()));
    std::vector<detail::Node*> order = topo_order();
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::vector<detail::Node*> topo_order() const {
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // Iterative DFS; graphs from deep models overflow the stack recursively.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    while (!stack.empty()) {
      auto& [n, child] = stack.back();
      if (child == 0 && seen.count(n)) {
        stack.pop_back();
        continue;
      }
      if (child < n->parents.size()) {
        detail::Node* next = n->parents[child++].get();
        if (!seen.count(next)) stack.emplace_back(next, 0);
      } else {
        seen.insert(n);
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backprop) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(values));
  bool needs = false;
  if (grad_mode_flag()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return out;
}

// Accumulates `grad` (laid out for `from`) into `acc` shaped `to`, summing
// over broadcast axes. `from` is the broadcast result shape.
inline void reduce_into(const std::vector<double>& grad, const Shape& from,
                        std::vector<double>& acc, const Shape& to) {
  if (from == to) {
    for (std::size_t i = 0; i < grad.size(); ++i) acc[i] += grad[i];
    return;
  }
  std::vector<Index> bstr = broadcast_strides(to, from);
  Index n = numel_of(from);
  std::size_t nd = from.size();
  std::vector<Index> idx(nd, 0);
  Index dst = 0;
  for (Index flat = 0; flat < n; ++flat) {
    acc[static_cast<std::size_t>(dst)] += grad[static_cast<std::size_t>(flat)];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      ++idx[d];
      dst += bstr[d];
      if (idx[d] < from[d]) break;
      idx[d] = 0;
      dst -= bstr[d] * from[d];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops with trailing-dimension broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// Broadcast layouts that get dedicated loops. Both require a.shape == out:
// kSuffix covers e.g. [B,L,D] op [D] (bias), kLastOne covers [B,L,D] op
// [B,L,1] (per-row scalars). Everything else uses the strided walk.
enum class BcastPattern { kSame, kSuffix, kLastOne, kGeneric };

inline BcastPattern classify_bcast(const Shape& a, const Shape& b,
                                   const Shape& out) {
  if (a == out && b == out) return BcastPattern::kSame;
  if (a != out) return BcastPattern::kGeneric;
  if (b.size() <= out.size()) {
    bool suffix = true;
    for (std::size_t i = 0; i < b.size(); ++i)
      suffix = suffix && b[i] == out[out.size() - b.size() + i];
    if (suffix && numel_of(b) > 0) return BcastPattern::kSuffix;
  }
  if (b.size() == out.size() && b.back() == 1) {
    bool rows = true;
    for (std::size_t i = 0; i + 1 < b.size(); ++i)
      rows = rows && b[i] == out[i];
    if (rows) return BcastPattern::kLastOne;
  }
  return BcastPattern::kGeneric;
}

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Index n = numel_of(out_shape);
  std::vector<double> out(static_cast<std::size_t>(n));

  const double* av = a.data().data();
  const double* bv = b.data().data();
  BcastPattern pat = classify_bcast(a.shape(), b.shape(), out_shape);
  switch (pat) {
    case BcastPattern::kSame:
      for (Index i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
      break;
    case BcastPattern::kSuffix: {
      Index bn = b.numel();
      for (Index r = 0; r < n / bn; ++r) {
        const double* ar = av + r * bn;
        double* o = out.data() + r * bn;
        for (Index j = 0; j < bn; ++j) o[j] = fwd(ar[j], bv[j]);
      }
      break;
    }
    case BcastPattern::kLastOne: {
      Index last = out_shape.back();
      for (Index r = 0; r < n / last; ++r) {
        const double* ar = av + r * last;
        double bq = bv[r];
        double* o = out.data() + r * last;
        for (Index j = 0; j < last; ++j) o[j] = fwd(ar[j], bq);
      }
      break;
    }
    case BcastPattern::kGeneric: {
      std::vector<Index> as = broadcast_strides(a.shape(), out_shape);
      std::vector<Index> bs = broadcast_strides(b.shape(), out_shape);
      std::size_t nd = out_shape.size();
      std::vector<Index> idx(nd, 0);
      Index ai = 0, bi = 0;
      for (Index flat = 0; flat < n; ++flat) {
        out[static_cast<std::size_t>(flat)] =
            fwd(av[ai], bv[bi]);
        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
          ++idx[d];
          ai += as[d];
          bi += bs[d];
          if (idx[d] < out_shape[d]) break;
          idx[d] = 0;
          ai -= as[d] * out_shape[d];
          bi -= bs[d] * out_shape[d];
        }
      }
      break;
    }
  }

  Shape ash = a.shape(), bsh = b.shape();
  return make_result(
      out_shape, std::move(out), {a, b},
      [fwd, bwd, ash, bsh, out_shape, pat](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        bool wa = pa.requires_grad, wb = pb.requires_grad;
        if (!wa && !wb) return;
        if (wa) pa.ensure_grad();
        if (wb) pb.ensure_grad();
        Index n = self.numel();
        const double* g = self.grad.data();
        const double* avv = pa.values.data();
        const double* bvv = pb.values.data();
        const double* yv = self.values.data();
        switch (pat) {
          case BcastPattern::kSame:
            for (Index i = 0; i < n; ++i) {
              auto [da, db] = bwd(avv[i], bvv[i], yv[i]);
              if (wa) pa.grad[static_cast<std::size_t>(i)] += g[i] * da;
              if (wb) pb.grad[static_cast<std::size_t>(i)] += g[i] * db;
            }
            break;
          case BcastPattern::kSuffix: {
            Index bn = numel_of(bsh);
            for (Index r = 0; r < n / bn; ++r) {
              const double* ar = avv + r * bn;
              const double* gr = g + r * bn;
              const double* yr = yv + r * bn;
              double* gar = wa ? pa.grad.data() + r * bn : nullptr;
              for (Index j = 0; j < bn; ++j) {
                auto [da, db] = bwd(ar[j], bvv[j], yr[j]);
                if (wa) gar[j] += gr[j] * da;
                if (wb) pb.grad[static_cast<std::size_t>(j)] += gr[j] * db;
              }
            }
            break;
          }
          case BcastPattern::kLastOne: {
            Index last = out_shape.back();
            for (Index r = 0; r < n / last; ++r) {
              const double* ar = avv + r * last;
              const double* gr = g + r * last;
              const double* yr = yv + r * last;
              double* gar = wa ? pa.grad.data() + r * last : nullptr;
              double bq = bvv[r];
              double acc = 0.0;
              for (Index j = 0; j < last; ++j) {
                auto [da, db] = bwd(ar[j], bq, yr[j]);
                if (wa) gar[j] += gr[j] * da;
                acc += gr[j] * db;
              }
              if (wb) pb.grad[static_cast<std::size_t>(r)] += acc;
            }
            break;
          }
          case BcastPattern::kGeneric: {
            std::vector<double> ga, gb;
            if (wa) ga.assign(self.values.size(), 0.0);
            if (wb) gb.assign(self.values.size(), 0.0);
            std::vector<Index> as = broadcast_strides(ash, out_shape);
            std::vector<Index> bs = broadcast_strides(bsh, out_shape);
            std::size_t nd = out_shape.size();
            std::vector<Index> idx(nd, 0);
            Index ai = 0, bi = 0;
            for (Index flat = 0; flat < n; ++flat) {
              auto [da, db] = bwd(avv[ai], bvv[bi], yv[flat]);
              if (wa) ga[static_cast<std::size_t>(flat)] = g[flat] * da;
              if (wb) gb[static_cast<std::size_t>(flat)] = g[flat] * db;
              for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                ++idx[d];
                ai += as[d];
                bi += bs[d];
                if (idx[d] < out_shape[d]) break;
                idx[d] = 0;
                ai -= as[d] * out_shape[d];
                bi -= bs[d] * out_shape[d];
              }
            }
            if (wa) reduce_into(ga, out_shape, pa.grad, ash);
            if (wb) reduce_into(gb, out_shape, pb.grad, bsh);
            break;
          }
        }
      });
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  return make_result(a.shape(), std::move(out), {a}, [bwd](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i)
      p.grad[i] += self.grad[i] * bwd(p.values[i], self.values[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double) {
        return std::pair<double, double>{1.0 / y, -x / (y * y)};
      });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.data())
    require(x > 0.0, ErrorCode::kDomain,
            "log requires strictly positive inputs, got " + std::to_string(x));
  return detail::unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

// Tanh-approximation GELU; the activation used inside every FFN expert.
inline double gelu_scalar(double x) {
  const double s = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(s * (x + 0.044715 * x * x * x)));
}

inline Tensor gelu(const Tensor& a) {
  const double s = std::sqrt(2.0 / M_PI);
  // tanh is the expensive part; compute it once and reuse it in backward.
  auto tanhs = std::make_shared<std::vector<double>>(a.data().size());
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a.data()[i];
    double t = std::tanh(s * (x + 0.044715 * x * x * x));
    (*tanhs)[i] = t;
    out[i] = 0.5 * x * (1.0 + t);
  }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [s, tanhs](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.values.size(); ++i) {
          double x = p.values[i];
          double t = (*tanhs)[i];
          double local = 0.5 * (1.0 + t) +
                         0.5 * x * (1.0 - t * t) * s *
                             (1.0 + 3.0 * 0.044715 * x * x);
          p.grad[i] += self.grad[i] * local;
        }
      });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  require(numel_of(new_shape) == a.numel(), ErrorCode::kDimension,
          "reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
              " changes element count");
  return detail::make_result(std::move(new_shape), a.data(), {a},
                             [](detail::Node& self) {
                               detail::Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p.grad[i] += self.grad[i];
                             });
}

inline Tensor transpose(const Tensor& a, Index ax0, Index ax1) {
  if (ax0 < 0) ax0 += a.ndim();
  if (ax1 < 0) ax1 += a.ndim();
  require(ax0 >= 0 && ax0 < a.ndim() && ax1 >= 0 && ax1 < a.ndim(),
          ErrorCode::kDimension, "transpose axis out of range");
  Shape out_shape = a.shape();
  std::swap(out_shape[ax0], out_shape[ax1]);
  std::vector<Index> in_str = row_major_strides(a.shape());
  std::vector<Index> perm_str = in_str;
  std::swap(perm_str[ax0], perm_str[ax1]);

  Index n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  std::size_t nd = out_shape.size();
  std::vector<Index> idx(nd, 0);
  Index src = 0;
  for (Index flat = 0; flat < n; ++flat) {
    out[static_cast<std::size_t>(flat)] = a.data()[static_cast<std::size_t>(src)];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      ++idx[d];
      src += perm_str[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      src -= perm_str[d] * out_shape[d];
    }
  }
  return detail::make_result(
      out_shape, std::move(out), {a},
      [out_shape, perm_str](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        Index n = self.numel();
        std::size_t nd = out_shape.size();
        std::vector<Index> idx(nd, 0);
        Index src = 0;
        for (Index flat = 0; flat < n; ++flat) {
          p.grad[static_cast<std::size_t>(src)] +=
              self.grad[static_cast<std::size_t>(flat)];
          for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            ++idx[d];
            src += perm_str[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= perm_str[d] * out_shape[d];
          }
        }
      });
}

inline Tensor broadcast_to(const Tensor& a, Shape target) {
  Shape check = broadcast_shapes(a.shape(), target);
  require(check == target, ErrorCode::kDimension,
          "cannot broadcast " + shape_str(a.shape()) + " to " +
              shape_str(target));
  Index n = numel_of(target);
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<Index> as = broadcast_strides(a.shape(), target);
  std::size_t nd = target.size();
  std::vector<Index> idx(nd, 0);
  Index ai = 0;
  for (Index flat = 0; flat < n; ++flat) {
    out[static_cast<std::size_t>(flat)] = a.data()[static_cast<std::size_t>(ai)];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      ++idx[d];
      ai += as[d];
      if (idx[d] < target[d]) break;
      idx[d] = 0;
      ai -= as[d] * target[d];
    }
  }
  Shape ash = a.shape();
  return detail::make_result(std::move(target), std::move(out), {a},
                             [ash](detail::Node& self) {
                               detail::Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               detail::reduce_into(self.grad, self.shape,
                                                   p.grad, ash);
                             });
}

inline Tensor concat(const Tensor& a, const Tensor& b, Index axis) {
  if (axis < 0) axis += a.ndim();
  require(a.ndim() == b.ndim(), ErrorCode::kDimension,
          "concat rank mismatch");
  for (Index d = 0; d < a.ndim(); ++d)
    require(d == axis || a.shape()[d] == b.shape()[d], ErrorCode::kDimension,
            "concat shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()) + " differ off axis");
  Shape out_shape = a.shape();
  out_shape[axis] += b.shape()[axis];

  Index outer = 1;
  for (Index d = 0; d < axis; ++d) outer *= out_shape[d];
  Index inner = 1;
  for (Index d = axis + 1; d < a.ndim(); ++d) inner *= out_shape[d];
  Index a_axis = a.shape()[axis], b_axis = b.shape()[axis];

  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  for (Index o = 0; o < outer; ++o) {
    double* dst = out.data() + o * (a_axis + b_axis) * inner;
    const double* pa = a.data().data() + o * a_axis * inner;
    const double* pb = b.data().data() + o * b_axis * inner;
    std::copy(pa, pa + a_axis * inner, dst);
    std::copy(pb, pb + b_axis * inner, dst + a_axis * inner);
  }
  return detail::make_result(
      out_shape, std::move(out), {a, b},
      [outer, inner, a_axis, b_axis](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        for (Index o = 0; o < outer; ++o) {
          const double* g = self.grad.data() + o * (a_axis + b_axis) * inner;
          if (pa.requires_grad) {
            pa.ensure_grad();
            double* ga = pa.grad.data() + o * a_axis * inner;
            for (Index i = 0; i < a_axis * inner; ++i) ga[i] += g[i];
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            double* gb = pb.grad.data() + o * b_axis * inner;
            for (Index i = 0; i < b_axis * inner; ++i)
              gb[i] += g[a_axis * inner + i];
          }
        }
      });
}

inline Tensor slice(const Tensor& a, Index axis, Index start, Index end) {
  if (axis < 0) axis += a.ndim();
  require(axis >= 0 && axis < a.ndim() && start >= 0 && end <= a.shape()[axis] &&
              start < end,
          ErrorCode::kDimension, "slice bounds out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = end - start;
  Index outer = 1;
  for (Index d = 0; d < axis; ++d) outer *= a.shape()[d];
  Index inner = 1;
  for (Index d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
  Index in_axis = a.shape()[axis];

  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  for (Index o = 0; o < outer; ++o) {
    const double* src = a.data().data() + (o * in_axis + start) * inner;
    std::copy(src, src + (end - start) * inner,
              out.data() + o * (end - start) * inner);
  }
  return detail::make_result(
      out_shape, std::move(out), {a},
      [outer, inner, in_axis, start, end](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (Index o = 0; o < outer; ++o) {
          const double* g = self.grad.data() + o * (end - start) * inner;
          double* gp = p.grad.data() + (o * in_axis + start) * inner;
          for (Index i = 0; i < (end - start) * inner; ++i) gp[i] += g[i];
        }
      });
}

// Gathers rows of a 2-D tensor; indices may repeat. Backward scatter-adds.
inline Tensor index_select(const Tensor& a, const std::vector<Index>& indices) {
  require(a.ndim() == 2, ErrorCode::kDimension,
          "index_select expects a 2-D tensor, got " + shape_str(a.shape()));
  Index rows = a.shape()[0], cols = a.shape()[1];
  for (Index i : indices)
    require(i >= 0 && i < rows, ErrorCode::kDimension,
            "index_select row " + std::to_string(i) + " out of range");
  Shape out_shape{static_cast<Index>(indices.size()), cols};
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy(a.data().data() + indices[r] * cols,
              a.data().data() + (indices[r] + 1) * cols, out.data() + r * cols);
  return detail::make_result(
      std::move(out_shape), std::move(out), {a},
      [indices, cols](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t r = 0; r < indices.size(); ++r) {
          const double* g = self.grad.data() + r * cols;
          double* gp = p.grad.data() + indices[r] * cols;
          for (Index c = 0; c < cols; ++c) gp[c] += g[c];
        }
      });
}

// Scatter-add of rows into a fresh [n_rows, D] tensor: out[idx[t]] += src[t].
inline Tensor scatter_add_rows(const Tensor& src,
                               const std::vector<Index>& indices,
                               Index n_rows) {
  require(src.ndim() == 2, ErrorCode::kDimension,
          "scatter_add_rows expects a 2-D source");
  require(static_cast<Index>(indices.size()) == src.shape()[0],
          ErrorCode::kDimension, "scatter_add_rows index count mismatch");
  Index cols = src.shape()[1];
  for (Index i : indices)
    require(i >= 0 && i < n_rows, ErrorCode::kDimension,
            "scatter_add_rows row out of range");
  std::vector<double> out(static_cast<std::size_t>(n_rows * cols), 0.0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const double* s = src.data().data() + r * cols;
    double* d = out.data() + indices[r] * cols;
    for (Index c = 0; c < cols; ++c) d[c] += s[c];
  }
  return detail::make_result(
      Shape{n_rows, cols}, std::move(out), {src},
      [indices, cols](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t r = 0; r < indices.size(); ++r) {
          const double* g = self.grad.data() + indices[r] * cols;
          double* gp = p.grad.data() + r * cols;
          for (Index c = 0; c < cols; ++c) gp[c] += g[c];
        }
      });
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

// Enumerates broadcast batch offsets for a/b/out given their batch shapes.
struct BatchMap {
  Shape batch;                 // broadcast batch shape
  std::vector<Index> a_str, b_str;
  Index count = 1;

  BatchMap(const Shape& a, const Shape& b) {
    Shape ab(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
    batch = broadcast_shapes(ab, bb);
    a_str = broadcast_strides(ab, batch);
    b_str = broadcast_strides(bb, batch);
    count = numel_of(batch);
  }

  // Flat batch index -> (a_batch, b_batch) flat offsets in matrix units.
  std::pair<Index, Index> locate(Index flat) const {
    Index ai = 0, bi = 0;
    for (int d = static_cast<int>(batch.size()) - 1; d >= 0; --d) {
      Index q = flat / batch[d];
      Index r = flat - q * batch[d];
      ai += r * a_str[d];
      bi += r * b_str[d];
      flat = q;
    }
    return {ai, bi};
  }
};

}  // namespace detail

// Batched matrix product a[..,M,K] x b[..,K,N] with broadcastable batch dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() >= 2 && b.ndim() >= 2, ErrorCode::kDimension,
          "matmul requires rank >= 2");
  Index M = a.dim(-2), K = a.dim(-1), Kb = b.dim(-2), N = b.dim(-1);
  require(K == Kb, ErrorCode::kDimension,
          "matmul inner dims differ: " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  detail::BatchMap map(a.shape(), b.shape());
  Shape out_shape = map.batch;
  out_shape.push_back(M);
  out_shape.push_back(N);

  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)), 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (Index batch = 0; batch < map.count; ++batch) {
    auto [ao, bo] = map.locate(batch);
    const double* A = av + ao * M * K;
    const double* B = bv + bo * K * N;
    double* C = out.data() + batch * M * N;
    for (Index i = 0; i < M; ++i) {
      const double* Ai = A + i * K;
      double* Ci = C + i * N;
      for (Index k = 0; k < K; ++k) {
        double aik = Ai[k];
        const double* Bk = B + k * N;
        for (Index j = 0; j < N; ++j) Ci[j] += aik * Bk[j];
      }
    }
  }

  Shape ash = a.shape(), bsh = b.shape();
  return detail::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [ash, bsh, M, K, N](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        detail::BatchMap map(ash, bsh);
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Index batch = 0; batch < map.count; ++batch) {
          auto [ao, bo] = map.locate(batch);
          const double* A = pa.values.data() + ao * M * K;
          const double* B = pb.values.data() + bo * K * N;
          const double* G = self.grad.data() + batch * M * N;
          if (pa.requires_grad) {
            double* dA = pa.grad.data() + ao * M * K;
            // dA[i,k] += sum_j G[i,j] * B[k,j]
            for (Index i = 0; i < M; ++i) {
              const double* Gi = G + i * N;
              double* dAi = dA + i * K;
              for (Index k = 0; k < K; ++k) {
                const double* Bk = B + k * N;
                double acc = 0.0;
                for (Index j = 0; j < N; ++j) acc += Gi[j] * Bk[j];
                dAi[k] += acc;
              }
            }
          }
          if (pb.requires_grad) {
            double* dB = pb.grad.data() + bo * K * N;
            // dB[k,j] += sum_i A[i,k] * G[i,j]
            for (Index i = 0; i < M; ++i) {
              const double* Ai = A + i * K;
              const double* Gi = G + i * N;
              for (Index k = 0; k < K; ++k) {
                double aik = Ai[k];
                double* dBk = dB + k * N;
                for (Index j = 0; j < N; ++j) dBk[j] += aik * Gi[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  Index outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, Index axis) {
  AxisSplit r;
  for (Index d = 0; d < static_cast<Index>(s.size()); ++d) {
    if (d < axis) r.outer *= s[d];
    else if (d == axis) r.axis = s[d];
    else r.inner *= s[d];
  }
  return r;
}

inline Index normalize_axis(Index axis, Index ndim) {
  if (axis < 0) axis += ndim;
  require(axis >= 0 && axis < ndim, ErrorCode::kDimension,
          "axis out of range");
  return axis;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, Index axis, bool keepdims = false) {
  axis = detail::normalize_axis(axis, a.ndim());
  auto sp = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdims) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};

  std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index x = 0; x < sp.axis; ++x) {
      const double* src = a.data().data() + (o * sp.axis + x) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  return detail::make_result(std::move(out_shape), std::move(out), {a},
                             [sp](detail::Node& self) {
                               detail::Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (Index o = 0; o < sp.outer; ++o)
                                 for (Index x = 0; x < sp.axis; ++x) {
                                   const double* g =
                                       self.grad.data() + o * sp.inner;
                                   double* gp = p.grad.data() +
                                                (o * sp.axis + x) * sp.inner;
                                   for (Index i = 0; i < sp.inner; ++i)
                                     gp[i] += g[i];
                                 }
                             });
}

inline Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double x : a.data()) total += x;
  return detail::make_result(Shape{1}, {total}, {a}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    double g = self.grad[0];
    for (double& gp : p.grad) gp += g;
  });
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Numerically stable softmax along `axis` (max-subtraction).
inline Tensor softmax(const Tensor& a, Index axis) {
  axis = detail::normalize_axis(axis, a.ndim());
  auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.data().size());
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const double* src = a.data().data() + o * sp.axis * sp.inner + i;
      double* dst = out.data() + o * sp.axis * sp.inner + i;
      double m = src[0];
      for (Index x = 1; x < sp.axis; ++x)
        m = std::max(m, src[x * sp.inner]);
      double z = 0.0;
      for (Index x = 0; x < sp.axis; ++x) {
        double e = std::exp(src[x * sp.inner] - m);
        dst[x * sp.inner] = e;
        z += e;
      }
      for (Index x = 0; x < sp.axis; ++x) dst[x * sp.inner] /= z;
    }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [sp](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (Index o = 0; o < sp.outer; ++o)
          for (Index i = 0; i < sp.inner; ++i) {
            const double* y = self.values.data() + o * sp.axis * sp.inner + i;
            const double* gy = self.grad.data() + o * sp.axis * sp.inner + i;
            double* gx = p.grad.data() + o * sp.axis * sp.inner + i;
            double dot = 0.0;
            for (Index x = 0; x < sp.axis; ++x)
              dot += gy[x * sp.inner] * y[x * sp.inner];
            for (Index x = 0; x < sp.axis; ++x)
              gx[x * sp.inner] += y[x * sp.inner] * (gy[x * sp.inner] - dot);
          }
      });
}

// Stable log(sum(exp(x))) along `axis`; gradient is the softmax.
inline Tensor logsumexp(const Tensor& a, Index axis, bool keepdims = false) {
  axis = detail::normalize_axis(axis, a.ndim());
  auto sp = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdims) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};

  std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner));
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const double* src = a.data().data() + o * sp.axis * sp.inner + i;
      double m = src[0];
      for (Index x = 1; x < sp.axis; ++x) m = std::max(m, src[x * sp.inner]);
      double z = 0.0;
      for (Index x = 0; x < sp.axis; ++x) z += std::exp(src[x * sp.inner] - m);
      out[static_cast<std::size_t>(o * sp.inner + i)] = m + std::log(z);
    }
  return detail::make_result(
      std::move(out_shape), std::move(out), {a}, [sp](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (Index o = 0; o < sp.outer; ++o)
          for (Index i = 0; i < sp.inner; ++i) {
            double lse = self.values[static_cast<std::size_t>(o * sp.inner + i)];
            double g = self.grad[static_cast<std::size_t>(o * sp.inner + i)];
            const double* x = p.values.data() + o * sp.axis * sp.inner + i;
            double* gx = p.grad.data() + o * sp.axis * sp.inner + i;
            for (Index k = 0; k < sp.axis; ++k)
              gx[k * sp.inner] += g * std::exp(x[k * sp.inner] - lse);
          }
      });
}

// Layer normalization over the last axis with affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  require(eps > 0.0, ErrorCode::kContract, "layer_norm eps must be > 0");
  Index d = x.dim(-1);
  require(gain.numel() == d && bias.numel() == d, ErrorCode::kDimension,
          "layer_norm gain/bias must match the last axis");
  Index rows = x.numel() / d;
  std::vector<double> out(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  std::vector<double> means(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * d;
    double m = 0.0;
    for (Index i = 0; i < d; ++i) m += src[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (Index i = 0; i < d; ++i) v += (src[i] - m) * (src[i] - m);
    v /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(v + eps);
    means[static_cast<std::size_t>(r)] = m;
    inv_std[static_cast<std::size_t>(r)] = is;
    double* dst = out.data() + r * d;
    for (Index i = 0; i < d; ++i)
      dst[i] = (src[i] - m) * is * gain.data()[static_cast<std::size_t>(i)] +
               bias.data()[static_cast<std::size_t>(i)];
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, means, inv_std](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pg = *self.parents[1];
        detail::Node& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Index r = 0; r < rows; ++r) {
          const double* xv = px.values.data() + r * d;
          const double* gy = self.grad.data() + r * d;
          double m = means[static_cast<std::size_t>(r)];
          double is = inv_std[static_cast<std::size_t>(r)];
          if (pg.requires_grad || pb.requires_grad) {
            for (Index i = 0; i < d; ++i) {
              double xhat = (xv[i] - m) * is;
              if (pg.requires_grad) pg.grad[i] += gy[i] * xhat;
              if (pb.requires_grad) pb.grad[i] += gy[i];
            }
          }
          if (px.requires_grad) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (Index i = 0; i < d; ++i) {
              double xhat = (xv[i] - m) * is;
              double dxhat = gy[i] * pg.values[i];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            double* gx = px.grad.data() + r * d;
            for (Index i = 0; i < d; ++i) {
              double xhat = (xv[i] - m) * is;
              double dxhat = gy[i] * pg.values[i];
              gx[i] += is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
          }
        }
      });
}

}  // namespace suede
