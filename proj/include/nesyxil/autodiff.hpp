#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every primitive records a node whose backward rule is itself written in
// terms of primitives. Running backward with `create_graph` therefore records
// the gradient computation onto the graph, which is what nested
// differentiation (input-gradient penalties, gradients of integrated
// gradients) needs. Without `create_graph` the backward rules run with
// recording disabled and the graph is released afterwards.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nesyxil/errors.hpp"
#include "nesyxil/tensor.hpp"

namespace nesyxil::ad {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that gradients can be taken with respect to.
  static Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf that never requires gradients.
  static Var constant(Tensor value) { return leaf(std::move(value), false); }
  static Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  bool defined() const { return static_cast<bool>(node_); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& out, std::span<const Var> in, const Var& grad)>;

struct Node : std::enable_shared_from_this<Node> {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  const char* op = "leaf";
  bool requires_grad = false;
  bool released = false;
  // Set on values derived from a gradient computed without create_graph;
  // such values carry no second-order information.
  bool first_order_only = false;
};

inline Var Var::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteValue("leaf tensor contains NaN or Inf");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

inline const Tensor& Var::value() const { return node_->value; }
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }

// ---------------------------------------------------------------------------
// Recording mode

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_enabled_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGrad : GradModeGuard {
  NoGrad() : GradModeGuard(false) {}
};

inline Var make_op(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NonFiniteValue(std::string("non-finite output of ") + op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const auto& in : inputs) {
    needs = needs || in.requires_grad();
    n->first_order_only = n->first_order_only || in.node()->first_order_only;
  }
  if (needs && grad_enabled()) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline Var detach(const Var& v) { return Var::constant(v.value()); }

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

inline Shape pad_shape(const Shape& s, std::size_t rank) {
  Shape out(rank - s.size(), 1);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa = pad_shape(a, r), pb = pad_shape(b, r), out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      out[i] = pa[i];
    } else if (pa[i] == 1) {
      out[i] = pb[i];
    } else {
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Strides of `s` viewed inside `out`, zero along broadcast dimensions.
inline std::vector<std::size_t> bcast_strides(const Shape& s, const Shape& out) {
  Shape ps = pad_shape(s, out.size());
  auto st = strides_of(ps);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ps[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

// Calls f(out_index, offset_a, offset_b, inner_len, inner_stride_a,
// inner_stride_b) once per run of the innermost dimension.
template <typename F>
void for_each_run(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t inner = out[r - 1];
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    f(base, oa, ob, inner, sa[r - 1], sb[r - 1]);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for_each_run(os, sa, sb, [&](std::size_t base, std::size_t oa, std::size_t ob, std::size_t n, std::size_t ia, std::size_t ib) {
    for (std::size_t i = 0; i < n; ++i) po[base + i] = f(pa[oa + i * ia], pb[ob + i * ib]);
  });
  return out;
}

template <typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tensor sum_to_tensor(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  Shape pt = pad_shape(target, t.rank());
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (pt[i] != 1 && pt[i] != t.shape()[i]) {
      throw ShapeMismatch("cannot reduce " + shape_str(t.shape()) + " to " + shape_str(target));
    }
  }
  Tensor out(target);
  auto st = bcast_strides(target, t.shape());
  std::vector<std::size_t> zero(t.rank(), 0);
  const double* pi = t.data();
  double* po = out.data();
  for_each_run(t.shape(), st, zero, [&](std::size_t base, std::size_t oo, std::size_t, std::size_t n, std::size_t io, std::size_t) {
    for (std::size_t i = 0; i < n; ++i) po[oo + i * io] += pi[base + i];
  });
  return out;
}

inline Tensor broadcast_tensor(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  if (broadcast_shape(t.shape(), target) != target) {
    throw ShapeMismatch("cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(target));
  }
  Tensor out(target);
  auto st = bcast_strides(t.shape(), target);
  std::vector<std::size_t> zero(target.size(), 0);
  const double* pi = t.data();
  double* po = out.data();
  for_each_run(target, st, zero, [&](std::size_t base, std::size_t oi, std::size_t, std::size_t n, std::size_t ii, std::size_t) {
    for (std::size_t i = 0; i < n; ++i) po[base + i] = pi[oi + i * ii];
  });
  return out;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var pow_scalar(const Var& a, double p);
Var sum(const Var& a, int axis, bool keepdim = true);
Var sum_all(const Var& a);
Var mean(const Var& a, int axis, bool keepdim = true);
Var mean_all(const Var& a);
Var max(const Var& a, int axis, bool keepdim = true);
Var softmax(const Var& a, int axis);
Var log_softmax(const Var& a, int axis);
Var matmul(const Var& a, const Var& w);
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var transpose(const Var& a);
Var permute(const Var& a, const std::vector<std::size_t>& perm);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, int axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, int axis);
Var broadcast_to(const Var& a, const Shape& shape);
Var sum_to(const Var& a, const Shape& shape);
Var dropout(const Var& a, double p, bool train, std::mt19937_64& rng);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

namespace detail {
// Zero-pads `g` into `full` along `axis` starting at `begin`; adjoint of slice.
Var embed(const Var& g, const Shape& full, std::size_t axis, std::size_t begin);
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return make_op("add", detail::binary(a.value(), b.value(), std::plus<>()), {a, b},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   std::vector<Var> r(2);
                   if (in[0].requires_grad()) r[0] = sum_to(g, in[0].shape());
                   if (in[1].requires_grad()) r[1] = sum_to(g, in[1].shape());
                   return r;
                 });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op("sub", detail::binary(a.value(), b.value(), std::minus<>()), {a, b},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   std::vector<Var> r(2);
                   if (in[0].requires_grad()) r[0] = sum_to(g, in[0].shape());
                   if (in[1].requires_grad()) r[1] = neg(sum_to(g, in[1].shape()));
                   return r;
                 });
}

inline Var mul(const Var& a, const Var& b) {
  return make_op("mul", detail::binary(a.value(), b.value(), std::multiplies<>()), {a, b},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   std::vector<Var> out(2);
                   if (in[0].requires_grad()) out[0] = sum_to(mul(g, in[1]), in[0].shape());
                   if (in[1].requires_grad()) out[1] = sum_to(mul(g, in[0]), in[1].shape());
                   return out;
                 });
}

inline Var div(const Var& a, const Var& b) {
  return make_op("div", detail::binary(a.value(), b.value(), std::divides<>()), {a, b},
                 [](const Var& out, std::span<const Var> in, const Var& g) {
                   std::vector<Var> r(2);
                   if (in[0].requires_grad()) r[0] = sum_to(div(g, in[1]), in[0].shape());
                   if (in[1].requires_grad()) r[1] = sum_to(neg(div(mul(g, out), in[1])), in[1].shape());
                   return r;
                 });
}

inline Var neg(const Var& a) {
  return make_op("neg", detail::unary(a.value(), [](double x) { return -x; }), {a},
                 [](const Var&, std::span<const Var>, const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double s) {
  return make_op("scale", detail::unary(a.value(), [s](double x) { return s * x; }), {a},
                 [s](const Var&, std::span<const Var>, const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

inline Var add_scalar(const Var& a, double s) {
  return make_op("add_scalar", detail::unary(a.value(), [s](double x) { return x + s; }), {a},
                 [](const Var&, std::span<const Var>, const Var& g) { return std::vector<Var>{g}; });
}

inline Var relu(const Var& a) {
  return make_op("relu", detail::unary(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   Tensor mask = detail::unary(in[0].value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
                   return std::vector<Var>{mul(g, Var::constant(std::move(mask)))};
                 });
}

inline Var exp(const Var& a) {
  return make_op("exp", detail::unary(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Var& out, std::span<const Var>, const Var& g) { return std::vector<Var>{mul(g, out)}; });
}

inline Var log(const Var& a) {
  return make_op("log", detail::unary(a.value(), [](double x) { return std::log(x); }), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) { return std::vector<Var>{div(g, in[0])}; });
}

inline Var square(const Var& a) {
  return make_op("square", detail::unary(a.value(), [](double x) { return x * x; }), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   return std::vector<Var>{mul(g, scale(in[0], 2.0))};
                 });
}

inline Var pow_scalar(const Var& a, double p) {
  return make_op("pow", detail::unary(a.value(), [p](double x) { return std::pow(x, p); }), {a},
                 [p](const Var&, std::span<const Var> in, const Var& g) {
                   return std::vector<Var>{mul(g, scale(pow_scalar(in[0], p - 1.0), p))};
                 });
}

inline Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return make_op("broadcast_to", detail::broadcast_tensor(a.value(), shape), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   return std::vector<Var>{sum_to(g, in[0].shape())};
                 });
}

inline Var sum_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return make_op("sum_to", detail::sum_to_tensor(a.value(), shape), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   return std::vector<Var>{broadcast_to(g, in[0].shape())};
                 });
}

inline Var sum(const Var& a, int axis, bool keepdim) {
  const std::size_t ax = a.value().normalize_axis(axis);
  auto sp = detail::split_axis(a.shape(), ax);
  Shape kept = a.shape();
  kept[ax] = 1;
  Tensor out(kept);
  const double* pa = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.n; ++i) {
      const double* row = pa + (o * sp.n + i) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t j = 0; j < sp.inner; ++j) dst[j] += row[j];
    }
  }
  Var r = make_op("sum", std::move(out), {a}, [](const Var&, std::span<const Var> in, const Var& g) {
    return std::vector<Var>{broadcast_to(g, in[0].shape())};
  });
  if (keepdim) return r;
  Shape squeezed = a.shape();
  squeezed.erase(squeezed.begin() + static_cast<long>(ax));
  if (squeezed.empty()) squeezed = {1};
  return reshape(r, squeezed);
}

inline Var sum_all(const Var& a) { return sum_to(a, Shape{1}); }

inline Var mean(const Var& a, int axis, bool keepdim) {
  const double n = static_cast<double>(a.value().dim(axis));
  return scale(sum(a, axis, keepdim), 1.0 / n);
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

inline Var max(const Var& a, int axis, bool keepdim) {
  const std::size_t ax = a.value().normalize_axis(axis);
  auto sp = detail::split_axis(a.shape(), ax);
  Shape kept = a.shape();
  kept[ax] = 1;
  Tensor out(kept);
  Tensor mask(a.shape());
  const double* pa = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < sp.n; ++i) {
        if (pa[(o * sp.n + i) * sp.inner + j] > pa[(o * sp.n + best) * sp.inner + j]) best = i;
      }
      out[o * sp.inner + j] = pa[(o * sp.n + best) * sp.inner + j];
      mask[(o * sp.n + best) * sp.inner + j] = 1.0;
    }
  }
  Var r = make_op("max", std::move(out), {a}, [mask = std::move(mask)](const Var&, std::span<const Var> in, const Var& g) {
    return std::vector<Var>{mul(broadcast_to(g, in[0].shape()), Var::constant(mask))};
  });
  if (keepdim) return r;
  Shape squeezed = a.shape();
  squeezed.erase(squeezed.begin() + static_cast<long>(ax));
  if (squeezed.empty()) squeezed = {1};
  return reshape(r, squeezed);
}

inline Var softmax(const Var& a, int axis) {
  const std::size_t ax = a.value().normalize_axis(axis);
  auto sp = detail::split_axis(a.shape(), ax);
  Tensor out(a.shape());
  const double* pa = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      auto at = [&](std::size_t i) { return (o * sp.n + i) * sp.inner + j; };
      double m = pa[at(0)];
      for (std::size_t i = 1; i < sp.n; ++i) m = std::max(m, pa[at(i)]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) z += (out[at(i)] = std::exp(pa[at(i)] - m));
      for (std::size_t i = 0; i < sp.n; ++i) out[at(i)] /= z;
    }
  }
  return make_op("softmax", std::move(out), {a}, [axis](const Var& y, std::span<const Var>, const Var& g) {
    Var t = mul(g, y);
    return std::vector<Var>{sub(t, mul(y, sum(t, axis)))};
  });
}

inline Var log_softmax(const Var& a, int axis) {
  const std::size_t ax = a.value().normalize_axis(axis);
  auto sp = detail::split_axis(a.shape(), ax);
  Tensor out(a.shape());
  const double* pa = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      auto at = [&](std::size_t i) { return (o * sp.n + i) * sp.inner + j; };
      double m = pa[at(0)];
      for (std::size_t i = 1; i < sp.n; ++i) m = std::max(m, pa[at(i)]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) z += std::exp(pa[at(i)] - m);
      const double lse = m + std::log(z);
      for (std::size_t i = 0; i < sp.n; ++i) out[at(i)] = pa[at(i)] - lse;
    }
  }
  return make_op("log_softmax", std::move(out), {a}, [axis](const Var& y, std::span<const Var>, const Var& g) {
    return std::vector<Var>{sub(g, mul(exp(y), sum(g, axis)))};
  });
}

inline Var reshape(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  return make_op("reshape", a.value().reshaped(std::move(shape)), {a},
                 [](const Var&, std::span<const Var> in, const Var& g) {
                   return std::vector<Var>{reshape(g, in[0].shape())};
                 });
}

inline Var matmul(const Var& a, const Var& w) {
  const Tensor& av = a.value();
  const Tensor& wv = w.value();
  if (av.rank() < 2 || wv.rank() != 2 || av.dim(-1) != wv.dim(0)) {
    throw ShapeMismatch("matmul " + shape_str(av.shape()) + " x " + shape_str(wv.shape()));
  }
  const std::size_t k = wv.dim(0), m = wv.dim(1), rows = av.numel() / k;
  Shape os = av.shape();
  os.back() = m;
  Tensor out(os);
  detail::MutMap(out.data(), rows, m).noalias() = detail::ConstMap(av.data(), rows, k) * detail::ConstMap(wv.data(), k, m);
  return make_op("matmul", std::move(out), {a, w}, [](const Var&, std::span<const Var> in, const Var& g) {
    std::vector<Var> r(2);
    if (in[0].requires_grad()) r[0] = matmul(g, transpose(in[1]));
    if (in[1].requires_grad()) {
      const std::size_t k = in[1].shape()[0], m = in[1].shape()[1];
      const std::size_t rows = in[0].numel() / k;
      Var a3 = reshape(in[0], {1, rows, k});
      Var g3 = reshape(g, {1, rows, m});
      r[1] = reshape(bmm(a3, g3, true, false), {k, m});
    }
    return r;
  });
}

inline Var bmm(const Var& a, const Var& b, bool ta, bool tb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ShapeMismatch("bmm " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t batch = av.dim(0);
  const std::size_t ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
  const std::size_t n = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t kb = tb ? bc : br, m = tb ? br : bc;
  if (k != kb) throw ShapeMismatch("bmm inner dimensions " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor out(Shape{batch, n, m});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMap A(av.data() + i * ar * ac, ar, ac);
    detail::ConstMap B(bv.data() + i * br * bc, br, bc);
    detail::MutMap C(out.data() + i * n * m, n, m);
    if (!ta && !tb) C.noalias() = A * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_op("bmm", std::move(out), {a, b}, [ta, tb](const Var&, std::span<const Var> in, const Var& g) {
    const Var& A = in[0];
    const Var& B = in[1];
    std::vector<Var> r(2);
    const bool need_a = A.requires_grad(), need_b = B.requires_grad();
    if (!ta && !tb) {
      if (need_a) r[0] = bmm(g, B, false, true);
      if (need_b) r[1] = bmm(A, g, true, false);
    } else if (!ta && tb) {
      if (need_a) r[0] = bmm(g, B, false, false);
      if (need_b) r[1] = bmm(g, A, true, false);
    } else if (ta && !tb) {
      if (need_a) r[0] = bmm(B, g, false, true);
      if (need_b) r[1] = bmm(A, g, false, false);
    } else {
      if (need_a) r[0] = bmm(B, g, true, true);
      if (need_b) r[1] = bmm(g, A, true, true);
    }
    return r;
  });
}

inline Var permute(const Var& a, const std::vector<std::size_t>& perm) {
  const Tensor& av = a.value();
  if (perm.size() != av.rank()) throw ShapeMismatch("permute rank mismatch");
  Shape os(perm.size());
  auto in_strides = detail::strides_of(av.shape());
  std::vector<std::size_t> st(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    os[i] = av.shape().at(perm[i]);
    st[i] = in_strides[perm[i]];
  }
  Tensor out(os);
  std::vector<std::size_t> zero(os.size(), 0);
  const double* pi = av.data();
  double* po = out.data();
  detail::for_each_run(os, st, zero, [&](std::size_t base, std::size_t oi, std::size_t, std::size_t n, std::size_t ii, std::size_t) {
    for (std::size_t i = 0; i < n; ++i) po[base + i] = pi[oi + i * ii];
  });
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return make_op("permute", std::move(out), {a}, [inverse](const Var&, std::span<const Var>, const Var& g) {
    return std::vector<Var>{permute(g, inverse)};
  });
}

inline Var transpose(const Var& a) {
  std::vector<std::size_t> perm(a.value().rank());
  std::iota(perm.begin(), perm.end(), 0);
  if (perm.size() < 2) throw ShapeMismatch("transpose needs rank >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

inline Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = a.value().normalize_axis(axis);
  auto sp = detail::split_axis(a.shape(), ax);
  if (begin > end || end > sp.n) throw ShapeMismatch("slice bounds out of range");
  Shape os = a.shape();
  os[ax] = end - begin;
  Tensor out(os);
  const std::size_t len = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = a.value().data() + (o * sp.n + begin) * sp.inner;
    std::copy(src, src + len, out.data() + o * len);
  }
  return make_op("slice", std::move(out), {a}, [ax, begin](const Var&, std::span<const Var> in, const Var& g) {
    return std::vector<Var>{detail::embed(g, in[0].shape(), ax, begin)};
  });
}

inline Var detail::embed(const Var& g, const Shape& full, std::size_t axis, std::size_t begin) {
  auto sp = detail::split_axis(full, axis);
  const std::size_t width = g.shape()[axis];
  Tensor out(full);
  const std::size_t len = width * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = g.value().data() + o * len;
    std::copy(src, src + len, out.data() + (o * sp.n + begin) * sp.inner);
  }
  return make_op("embed", std::move(out), {g}, [axis, begin, width](const Var&, std::span<const Var>, const Var& gg) {
    return std::vector<Var>{slice(gg, static_cast<int>(axis), begin, begin + width)};
  });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  const std::size_t ax = parts[0].value().normalize_axis(axis);
  Shape os = parts[0].shape();
  os[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) throw ShapeMismatch("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) throw ShapeMismatch("concat shape mismatch");
    }
    os[ax] += s[ax];
  }
  auto sp = detail::split_axis(os, ax);
  Tensor out(os);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[ax] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = p.value().data() + o * len;
      std::copy(src, src + len, out.data() + (o * sp.n + offset) * sp.inner);
    }
    offset += p.shape()[ax];
  }
  return make_op("concat", std::move(out), parts, [ax, offsets](const Var&, std::span<const Var> in, const Var& g) {
    std::vector<Var> r;
    for (std::size_t i = 0; i < in.size(); ++i) {
      r.push_back(slice(g, static_cast<int>(ax), offsets[i], offsets[i] + in[i].shape()[ax]));
    }
    return r;
  });
}

/// Inverted dropout: kept units are scaled by 1/(1-p). Identity when
/// `train` is false; the rng is not advanced then.
inline Var dropout(const Var& a, double p, bool train, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ShapeMismatch("dropout probability must lie in [0,1)");
  if (!train || p == 0.0) return a;
  Tensor mask(a.shape());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = keep(rng) ? s : 0.0;
  return mul(a, Var::constant(std::move(mask)));
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Var centered = sub(x, mean(x, -1));
  Var var = mean(square(centered), -1);
  Var normed = mul(centered, pow_scalar(add_scalar(var, eps), -0.5));
  return add(mul(normed, gamma), beta);
}

// ---------------------------------------------------------------------------
// Gradients

struct GradOptions {
  // Record the backward pass so the returned gradients can be differentiated
  // again.
  bool create_graph = false;
  // Keep the graph alive after a first-order pass.
  bool retain_graph = false;
};

/// Gradients of scalar `output` with respect to `inputs`. Inputs the output
/// does not depend on get zero gradients.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, GradOptions opts = {}) {
  if (output.numel() != 1) throw NotScalar("output of shape " + shape_str(output.shape()));
  if (output.node()->first_order_only) {
    throw LevelUnsupported("output depends on a gradient recorded without create_graph");
  }

  // Reverse topological order over nodes that require gradients.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (output.requires_grad()) {
    stack.emplace_back(output.node(), 0);
    seen.insert(output.node());
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->released) throw TapeConsumed(std::string("graph through ") + node->op + " was already released");
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].node();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> grads;
  {
    GradModeGuard mode(opts.create_graph);
    grads[output.node()] = Var::constant(Tensor(output.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (!node->backward) continue;
      auto found = grads.find(node);
      if (found == grads.end()) continue;
      Var self(node->shared_from_this());
      std::vector<Var> partial = node->backward(self, node->inputs, found->second);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Var& in = node->inputs[i];
        if (!in.requires_grad() || !partial[i].defined()) continue;
        auto [slot, inserted] = grads.try_emplace(in.node(), partial[i]);
        if (!inserted) slot->second = add(slot->second, partial[i]);
      }
    }
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node());
    if (it == grads.end()) {
      result.push_back(Var::constant(Tensor(in.shape(), 0.0)));
    } else if (opts.create_graph) {
      result.push_back(it->second);
    } else {
      Var g = Var::constant(it->second.value());
      g.node()->first_order_only = true;
      result.push_back(std::move(g));
    }
  }

  if (!opts.create_graph && !opts.retain_graph) {
    for (Node* node : order) {
      if (!node->backward) continue;
      node->backward = nullptr;
      node->inputs.clear();
      node->released = true;
    }
  }
  return result;
}

/// Convenience: plain tensors of first-order gradients.
inline std::vector<Tensor> grad_values(const Var& output, const std::vector<Var>& inputs) {
  std::vector<Tensor> out;
  for (const auto& g : grad(output, inputs)) out.push_back(g.value());
  return out;
}

}  // namespace nesyxil::ad
