#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vitgan/rng.hpp"

namespace vitgan {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a,
                                    const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

// Numeric failure that should abort a run (exit code 2 at the CLI).
struct NumericError : std::runtime_error {
  NumericError(const std::string& what, const std::string& where_, int64_t step_)
      : std::runtime_error(what), where(where_), step(step_) {}
  std::string where;
  int64_t step;
};

template <class T>
class Tape;
template <class T>
class GradientMap;

template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(numel(shape_), T(0))) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(data))) {
    check_shape();
    if (static_cast<int64_t>(data_->size()) != numel(shape_))
      throw std::invalid_argument("tensor: data size " +
                                  std::to_string(data_->size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor normal(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (T& x : *t.data_) x = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (T& x : *t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  const T* data() const { return data_->data(); }
  T* data() { return data_->data(); }
  T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("item: tensor has " + std::to_string(size()) +
                                  " elements, expected 1");
    return (*data_)[0];
  }

  T at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw std::invalid_argument("at: rank mismatch");
    int64_t off = 0;
    int d = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape_[d]) throw std::out_of_range("at: index out of range");
      off = off * shape_[d] + i;
      ++d;
    }
    return (*data_)[static_cast<size_t>(off)];
  }

  // Fresh storage, same values, no tape attachment.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  // Same storage, no tape attachment.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Same storage viewed under a different shape, no tape attachment.
  Tensor viewed_as(Shape shape) const {
    if (numel(shape) != size())
      throw std::invalid_argument("view: cannot view " + shape_str(shape_) +
                                  " as " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  bool all_finite() const {
    for (const T& x : *data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

 private:
  void check_shape() const {
    for (int d : shape_)
      if (d <= 0)
        throw std::invalid_argument("tensor: non-positive extent in shape " +
                                    shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;

  friend class Tape<T>;
};

namespace detail {

// Contexts passed to the per-node closures.
template <class T>
struct BackwardCtx {
  Tensor<T> upstream;  // gradient of the loss w.r.t. this node's output
  bool create_graph = false;
  // Saved forward tensors go through prep(): detached unless the backward
  // pass itself is being recorded for higher-order gradients.
  Tensor<T> prep(const Tensor<T>& saved) const {
    return create_graph ? saved : saved.detach();
  }
  std::function<void(int, Tensor<T>)> accumulate;  // slot -> gradient
};

template <class T>
struct JvpCtx {
  std::vector<Tensor<T>> tangents;  // aligned with node input slots
  const Tensor<T>& tan(int slot) const { return tangents[static_cast<size_t>(slot)]; }
};

template <class T>
struct Node {
  std::vector<int> inputs;  // node ids, -1 for untracked constants
  std::vector<Shape> in_shapes;
  Shape shape;
  std::function<void(BackwardCtx<T>&)> backward;       // null for leaves
  std::function<Tensor<T>(JvpCtx<T>&)> pushforward;    // null for leaves
};

}  // namespace detail

template <class T>
class GradientMap {
 public:
  GradientMap() = default;
  GradientMap(const Tape<T>* tape, std::vector<Tensor<T>> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  bool touched(const Tensor<T>& t) const {
    if (!t.tracked() || t.node() < 0 ||
        t.node() >= static_cast<int>(grads_.size()))
      return false;
    return grads_[static_cast<size_t>(t.node())].defined();
  }

  // Gradient of the loss w.r.t. t; zeros if the loss does not depend on it.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (!t.tracked())
      throw std::invalid_argument("grad: tensor is not tracked on any tape");
    if (touched(t)) return grads_[static_cast<size_t>(t.node())];
    return Tensor<T>::zeros(t.shape());
  }

  int touched_count() const {
    int n = 0;
    for (const auto& g : grads_)
      if (g.defined()) ++n;
    return n;
  }

  int touched_leaf_count() const;

 private:
  const Tape<T>* tape_ = nullptr;
  std::vector<Tensor<T>> grads_;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return static_cast<int>(nodes_.size()); }

  void clear() { nodes_.clear(); }

  bool is_leaf(int i) const {
    return !nodes_[static_cast<size_t>(i)].backward &&
           nodes_[static_cast<size_t>(i)].inputs.empty();
  }

  const Shape& node_shape(int i) const { return nodes_[static_cast<size_t>(i)].shape; }

  // Registers t as a differentiable leaf. Idempotent for tensors already on
  // this tape; rejects tensors tracked elsewhere.
  void watch(Tensor<T>& t) {
    if (!t.defined()) throw std::invalid_argument("watch: undefined tensor");
    if (t.tape_ == this) return;
    if (t.tape_ != nullptr)
      throw std::logic_error("watch: tensor already tracked on another tape");
    detail::Node<T> n;
    n.shape = t.shape();
    nodes_.push_back(std::move(n));
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size()) - 1;
  }

  int append(detail::Node<T> n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void adopt(Tensor<T>& t, int node) {
    t.tape_ = this;
    t.node_ = node;
  }

  // Reverse-mode sweep from a scalar loss. With create_graph the gradient
  // computations are themselves recorded, so gradient norms stay
  // differentiable (second-order penalties need this).
  GradientMap<T> backward(const Tensor<T>& loss, bool create_graph = false) {
    if (loss.tape_ != this)
      throw std::invalid_argument("backward: loss is not tracked on this tape");
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  shape_str(loss.shape()));
    const int n0 = static_cast<int>(nodes_.size());
    std::vector<Tensor<T>> grads(static_cast<size_t>(n0));
    grads[static_cast<size_t>(loss.node_)] = Tensor<T>::ones(loss.shape());
    for (int i = n0 - 1; i >= 0; --i) {
      if (!grads[static_cast<size_t>(i)].defined()) continue;
      // Copy the closure and input list: recording the backward ops grows
      // nodes_ and would invalidate references into it.
      auto back = nodes_[static_cast<size_t>(i)].backward;
      if (!back) continue;
      auto inputs = nodes_[static_cast<size_t>(i)].inputs;
      detail::BackwardCtx<T> ctx;
      ctx.upstream = create_graph ? grads[static_cast<size_t>(i)]
                                  : grads[static_cast<size_t>(i)].detach();
      ctx.create_graph = create_graph;
      ctx.accumulate = [&, inputs](int slot, Tensor<T> g) {
        int j = inputs[static_cast<size_t>(slot)];
        if (j < 0) return;
        if (!create_graph) g = g.detach();
        if (g.shape() != nodes_[static_cast<size_t>(j)].shape)
          throw std::logic_error("backward: gradient shape " +
                                 shape_str(g.shape()) + " does not match node shape " +
                                 shape_str(nodes_[static_cast<size_t>(j)].shape));
        auto& slotg = grads[static_cast<size_t>(j)];
        slotg = slotg.defined() ? add(slotg, g) : std::move(g);
      };
      back(ctx);
    }
    return GradientMap<T>(this, std::move(grads));
  }

  // Forward-mode sweep: tangent of y when x moves along v. Reuses the same
  // recorded graph as backward, walking it in insertion order.
  Tensor<T> jvp(const Tensor<T>& x, const Tensor<T>& v, const Tensor<T>& y) {
    if (x.tape_ != this || y.tape_ != this)
      throw std::invalid_argument("jvp: tensors are not tracked on this tape");
    if (v.shape() != x.shape()) shape_fail("jvp", v.shape(), x.shape());
    std::vector<Tensor<T>> tan(nodes_.size());
    tan[static_cast<size_t>(x.node_)] = v.detach();
    for (int i = 0; i <= y.node_; ++i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      if (!n.pushforward || i == x.node_) continue;
      bool any = false;
      for (int j : n.inputs)
        if (j >= 0 && tan[static_cast<size_t>(j)].defined()) any = true;
      if (!any) continue;
      detail::JvpCtx<T> ctx;
      ctx.tangents.reserve(n.inputs.size());
      for (size_t s = 0; s < n.inputs.size(); ++s) {
        int j = n.inputs[s];
        if (j >= 0 && tan[static_cast<size_t>(j)].defined())
          ctx.tangents.push_back(tan[static_cast<size_t>(j)]);
        else
          ctx.tangents.push_back(Tensor<T>::zeros(n.in_shapes[s]));
      }
      tan[static_cast<size_t>(i)] = n.pushforward(ctx);
    }
    auto& ty = tan[static_cast<size_t>(y.node_)];
    return ty.defined() ? ty : Tensor<T>::zeros(y.shape());
  }

 private:
  std::vector<detail::Node<T>> nodes_;

  template <class U>
  friend class GradientMap;
};

template <class T>
int GradientMap<T>::touched_leaf_count() const {
  int n = 0;
  for (size_t i = 0; i < grads_.size(); ++i)
    if (grads_[i].defined() && tape_->is_leaf(static_cast<int>(i))) ++n;
  return n;
}

namespace detail {

// Records an op node if any input is tracked. `value` holds the eagerly
// computed result; the closures see inputs by value (shared storage).
template <class T>
Tensor<T> make_op(std::vector<const Tensor<T>*> ins, Tensor<T> value,
                  std::function<void(BackwardCtx<T>&)> back,
                  std::function<Tensor<T>(JvpCtx<T>&)> push) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* p : ins) {
    if (!p->tracked()) continue;
    if (tape && p->tape() != tape)
      throw std::logic_error("op: inputs tracked on different tapes");
    tape = p->tape();
  }
  if (!tape) return value;
  Node<T> n;
  n.inputs.reserve(ins.size());
  n.in_shapes.reserve(ins.size());
  for (const Tensor<T>* p : ins) {
    n.inputs.push_back(p->tracked() ? p->node() : -1);
    n.in_shapes.push_back(p->shape());
  }
  n.shape = value.shape();
  n.backward = std::move(back);
  n.pushforward = std::move(push);
  int id = tape->append(std::move(n));
  tape->adopt(value, id);
  return value;
}

// ---- broadcasting ----------------------------------------------------

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[static_cast<size_t>(i - (r - ra))];
    int db = i < r - rb ? 1 : b[static_cast<size_t>(i - (r - rb))];
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
    out[static_cast<size_t>(i)] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int rs = static_cast<int>(s.size());
  std::vector<int64_t> st(static_cast<size_t>(r), 0);
  int64_t acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    int pos = i + (r - rs);
    st[static_cast<size_t>(pos)] = (s[static_cast<size_t>(i)] == 1) ? 0 : acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

template <class T, class F>
Tensor<T> binary_map(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (!a.defined() || !b.defined())
    throw std::invalid_argument(std::string(op) + ": undefined operand");
  Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  Tensor<T> out(out_shape);
  const int64_t n = out.size();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const int64_t na = a.size(), nb = b.size();
  if (nb == 1) {
    const T s = pb[0];
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], s);
    return out;
  }
  if (na == 1) {
    const T s = pa[0];
    for (int64_t i = 0; i < n; ++i) po[i] = f(s, pb[i]);
    return out;
  }
  // Suffix broadcast (bias adds, scalars): the smaller operand's shape is a
  // trailing slice of the output.
  auto is_suffix = [&](const Shape& s) {
    size_t off = out_shape.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i)
      if (s[i] != out_shape[off + i]) return false;
    return true;
  };
  if (a.shape() == out_shape && is_suffix(b.shape())) {
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i % nb]);
    return out;
  }
  if (b.shape() == out_shape && is_suffix(a.shape())) {
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i % na], pb[i]);
    return out;
  }
  // General case: odometer walk with broadcast strides.
  const int r = static_cast<int>(out_shape.size());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      oa += sa[static_cast<size_t>(d)];
      ob += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      oa -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      ob -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
  return out;
}

template <class T, class F>
Tensor<T> unary_map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

}  // namespace detail

// Forward declarations for ops used inside backward closures.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> neg(const Tensor<T>& a);
template <class T> Tensor<T> exp(const Tensor<T>& a);
template <class T> Tensor<T> sin(const Tensor<T>& a);
template <class T> Tensor<T> cos(const Tensor<T>& a);
template <class T> Tensor<T> scale(const Tensor<T>& a, T c);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> reduce_sum(const Tensor<T>& a, int axis, bool keepdim);
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm);
template <class T> Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len);
template <class T> Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis);

// Sums g down to `target` (inverse of broadcasting). Built from tracked ops
// so it stays differentiable when gradients are being recorded.
template <class T>
Tensor<T> reduce_to_shape(Tensor<T> g, const Shape& target) {
  while (g.ndim() > static_cast<int>(target.size())) g = reduce_sum(g, 0, false);
  for (int d = 0; d < g.ndim(); ++d)
    if (target[static_cast<size_t>(d)] == 1 && g.dim(d) > 1)
      g = reduce_sum(g, d, true);
  if (g.shape() != target) shape_fail("reduce_to_shape", g.shape(), target);
  return g;
}

// ---- arithmetic --------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_map<T>("add", a, b, [](T x, T y) { return x + y; });
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [sa, sb](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, reduce_to_shape(ctx.upstream, sa));
        ctx.accumulate(1, reduce_to_shape(ctx.upstream, sb));
      },
      [](detail::JvpCtx<T>& ctx) { return add(ctx.tan(0), ctx.tan(1)); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_map<T>("sub", a, b, [](T x, T y) { return x - y; });
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [sa, sb](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, reduce_to_shape(ctx.upstream, sa));
        ctx.accumulate(1, reduce_to_shape(neg(ctx.upstream), sb));
      },
      [](detail::JvpCtx<T>& ctx) { return sub(ctx.tan(0), ctx.tan(1)); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_map<T>("mul", a, b, [](T x, T y) { return x * y; });
  Tensor<T> av = a, bv = b;
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [av, bv, sa, sb](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, reduce_to_shape(mul(ctx.upstream, ctx.prep(bv)), sa));
        ctx.accumulate(1, reduce_to_shape(mul(ctx.upstream, ctx.prep(av)), sb));
      },
      [av, bv](detail::JvpCtx<T>& ctx) {
        return add(mul(ctx.tan(0), bv.detach()), mul(av.detach(), ctx.tan(1)));
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_map<T>("div", a, b, [](T x, T y) { return x / y; });
  Tensor<T> av = a, bv = b;
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [av, bv, sa, sb](detail::BackwardCtx<T>& ctx) {
        Tensor<T> bp = ctx.prep(bv);
        ctx.accumulate(0, reduce_to_shape(div(ctx.upstream, bp), sa));
        Tensor<T> ratio = div(ctx.prep(av), mul(bp, bp));
        ctx.accumulate(1, reduce_to_shape(neg(mul(ctx.upstream, ratio)), sb));
      },
      [av, bv](detail::JvpCtx<T>& ctx) {
        Tensor<T> bd = bv.detach();
        Tensor<T> t = sub(div(ctx.tan(0), bd),
                          mul(ctx.tan(1), div(av.detach(), mul(bd, bd))));
        return t;
      });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return -x; });
  return detail::make_op<T>(
      {&a}, std::move(out),
      [](detail::BackwardCtx<T>& ctx) { ctx.accumulate(0, neg(ctx.upstream)); },
      [](detail::JvpCtx<T>& ctx) { return neg(ctx.tan(0)); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = detail::unary_map(a, [c](T x) { return x * c; });
  return detail::make_op<T>(
      {&a}, std::move(out),
      [c](detail::BackwardCtx<T>& ctx) { ctx.accumulate(0, scale(ctx.upstream, c)); },
      [c](detail::JvpCtx<T>& ctx) { return scale(ctx.tan(0), c); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = detail::unary_map(a, [c](T x) { return x + c; });
  return detail::make_op<T>(
      {&a}, std::move(out),
      [](detail::BackwardCtx<T>& ctx) { ctx.accumulate(0, ctx.upstream); },
      [](detail::JvpCtx<T>& ctx) { return ctx.tan(0); });
}

// ---- transcendental ------------------------------------------------------

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::exp(x); });
  // The saved output is filled in after make_op adopts the result, so
  // higher-order passes see it as this node's tracked value rather than a
  // detached copy.
  auto y = std::make_shared<Tensor<T>>();
  Tensor<T> r = detail::make_op<T>(
      {&a}, std::move(out),
      [y](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, ctx.prep(*y)));
      },
      [y](detail::JvpCtx<T>& ctx) { return mul(ctx.tan(0), y->detach()); });
  *y = r;
  return r;
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::log(x); });
  Tensor<T> av = a;
  return detail::make_op<T>(
      {&a}, std::move(out),
      [av](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, div(ctx.upstream, ctx.prep(av)));
      },
      [av](detail::JvpCtx<T>& ctx) { return div(ctx.tan(0), av.detach()); });
}

template <class T>
Tensor<T> sin(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::sin(x); });
  Tensor<T> av = a;
  return detail::make_op<T>(
      {&a}, std::move(out),
      [av](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, cos(ctx.prep(av))));
      },
      [av](detail::JvpCtx<T>& ctx) { return mul(ctx.tan(0), cos(av.detach())); });
}

template <class T>
Tensor<T> cos(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::cos(x); });
  Tensor<T> av = a;
  return detail::make_op<T>(
      {&a}, std::move(out),
      [av](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, neg(mul(ctx.upstream, sin(ctx.prep(av)))));
      },
      [av](detail::JvpCtx<T>& ctx) {
        return neg(mul(ctx.tan(0), sin(av.detach())));
      });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::sqrt(x); });
  auto y = std::make_shared<Tensor<T>>();  // adopted output, see exp
  Tensor<T> r = detail::make_op<T>(
      {&a}, std::move(out),
      [y](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, div(scale(ctx.upstream, T(0.5)), ctx.prep(*y)));
      },
      [y](detail::JvpCtx<T>& ctx) {
        return div(scale(ctx.tan(0), T(0.5)), y->detach());
      });
  *y = r;
  return r;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::tanh(x); });
  auto y = std::make_shared<Tensor<T>>();  // adopted output, see exp
  auto factor = [](const Tensor<T>& yy) {
    return add_scalar(neg(mul(yy, yy)), T(1));  // 1 - y^2
  };
  Tensor<T> r = detail::make_op<T>(
      {&a}, std::move(out),
      [y, factor](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, factor(ctx.prep(*y))));
      },
      [y, factor](detail::JvpCtx<T>& ctx) {
        return mul(ctx.tan(0), factor(y->detach()));
      });
  *y = r;
  return r;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return x > T(0) ? x : T(0); });
  Tensor<T> mask = detail::unary_map(a, [](T x) { return x > T(0) ? T(1) : T(0); });
  return detail::make_op<T>(
      {&a}, std::move(out),
      [mask](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, mask));
      },
      [mask](detail::JvpCtx<T>& ctx) { return mul(ctx.tan(0), mask); });
}

// log(1 + e^x), computed as max(x,0) + log1p(e^-|x|) for stability.
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) {
    T m = x > T(0) ? x : T(0);
    return m + std::log1p(std::exp(-std::abs(x)));
  });
  Tensor<T> av = a;
  auto sigmoid_of = [](const Tensor<T>& x) {
    Tensor<T> e = exp(neg(x));
    return div(Tensor<T>::ones(x.shape()), add_scalar(e, T(1)));
  };
  return detail::make_op<T>(
      {&a}, std::move(out),
      [av, sigmoid_of](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, sigmoid_of(ctx.prep(av))));
      },
      [av, sigmoid_of](detail::JvpCtx<T>& ctx) {
        return mul(ctx.tan(0), sigmoid_of(av.detach()));
      });
}

template <class T>
Tensor<T> erf(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_map(a, [](T x) { return std::erf(x); });
  Tensor<T> av = a;
  const T k = static_cast<T>(2.0 / std::sqrt(3.14159265358979323846));
  auto deriv = [k](const Tensor<T>& x) { return scale(exp(neg(mul(x, x))), k); };
  return detail::make_op<T>(
      {&a}, std::move(out),
      [av, deriv](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, mul(ctx.upstream, deriv(ctx.prep(av))));
      },
      [av, deriv](detail::JvpCtx<T>& ctx) {
        return mul(ctx.tan(0), deriv(av.detach()));
      });
}

// Exact Gaussian CDF form, composed from erf so all derivatives flow.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  Tensor<T> cdf = scale(add_scalar(erf(scale(a, inv_sqrt2)), T(1)), T(0.5));
  return mul(a, cdf);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> e = exp(neg(a));
  return div(Tensor<T>::ones(a.shape()), add_scalar(e, T(1)));
}

// ---- reductions ----------------------------------------------------------

namespace detail {
inline int norm_axis(const char* op, int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw std::invalid_argument(std::string(op) + ": axis out of range");
  return axis;
}

inline Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape out = s;
  if (keepdim)
    out[static_cast<size_t>(axis)] = 1;
  else
    out.erase(out.begin() + axis);
  if (out.empty()) out = {1};
  return out;
}

// Decomposes a shape around `axis` into (outer, extent, inner) loop bounds.
inline void axis_spans(const Shape& s, int axis, int64_t& outer, int64_t& extent,
                       int64_t& inner) {
  outer = 1;
  inner = 1;
  extent = s[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    inner *= s[static_cast<size_t>(i)];
}
}  // namespace detail

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& a, int axis, bool keepdim) {
  axis = detail::norm_axis("reduce_sum", axis, a.ndim());
  Shape out_shape = detail::reduced_shape(a.shape(), axis, keepdim);
  Tensor<T> out(out_shape);
  int64_t outer, ext, inner;
  detail::axis_spans(a.shape(), axis, outer, ext, inner);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t e = 0; e < ext; ++e) {
      const T* src = pa + (o * ext + e) * inner;
      T* dst = po + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Shape in_shape = a.shape();
  Shape keep_shape = detail::reduced_shape(a.shape(), axis, true);
  return detail::make_op<T>(
      {&a}, std::move(out),
      [in_shape, keep_shape](detail::BackwardCtx<T>& ctx) {
        Tensor<T> up = reshape(ctx.upstream, keep_shape);
        ctx.accumulate(0, add(up, Tensor<T>::zeros(in_shape)));
      },
      [axis, keepdim](detail::JvpCtx<T>& ctx) {
        return reduce_sum(ctx.tan(0), axis, keepdim);
      });
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& a, int axis, bool keepdim) {
  int ax = detail::norm_axis("reduce_mean", axis, a.ndim());
  T inv = T(1) / static_cast<T>(a.dim(ax));
  return scale(reduce_sum(a, ax, keepdim), inv);
}

// Max along an axis; ties resolve to the lowest index.
template <class T>
Tensor<T> reduce_max(const Tensor<T>& a, int axis, bool keepdim) {
  axis = detail::norm_axis("reduce_max", axis, a.ndim());
  Shape out_shape = detail::reduced_shape(a.shape(), axis, keepdim);
  Tensor<T> out(out_shape);
  Tensor<T> mask(a.shape());
  int64_t outer, ext, inner;
  detail::axis_spans(a.shape(), axis, outer, ext, inner);
  const T* pa = a.data();
  T* po = out.data();
  T* pm = mask.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T best = pa[(o * ext) * inner + i];
      int64_t best_e = 0;
      for (int64_t e = 1; e < ext; ++e) {
        T v = pa[(o * ext + e) * inner + i];
        if (v > best) {
          best = v;
          best_e = e;
        }
      }
      po[o * inner + i] = best;
      pm[(o * ext + best_e) * inner + i] = T(1);
    }
  Shape in_shape = a.shape();
  Shape keep_shape = detail::reduced_shape(a.shape(), axis, true);
  return detail::make_op<T>(
      {&a}, std::move(out),
      [in_shape, keep_shape, mask](detail::BackwardCtx<T>& ctx) {
        Tensor<T> up = reshape(ctx.upstream, keep_shape);
        Tensor<T> wide = add(up, Tensor<T>::zeros(in_shape));
        ctx.accumulate(0, mul(wide, mask));
      },
      [axis, keepdim, mask](detail::JvpCtx<T>& ctx) {
        return reduce_sum(mul(ctx.tan(0), mask), axis, keepdim);
      });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> flat = reshape(a, {static_cast<int>(a.size())});
  return reduce_sum(flat, 0, false);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// ---- softmax ---------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  axis = detail::norm_axis("softmax", axis, a.ndim());
  Tensor<T> out(a.shape());
  int64_t outer, ext, inner;
  detail::axis_spans(a.shape(), axis, outer, ext, inner);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * ext * inner + i;
      T m = pa[base];
      for (int64_t e = 1; e < ext; ++e) m = std::max(m, pa[base + e * inner]);
      T z = T(0);
      for (int64_t e = 0; e < ext; ++e) {
        T v = std::exp(pa[base + e * inner] - m);
        po[base + e * inner] = v;
        z += v;
      }
      T invz = T(1) / z;
      for (int64_t e = 0; e < ext; ++e) po[base + e * inner] *= invz;
    }
  auto y = std::make_shared<Tensor<T>>();  // adopted output, see exp
  Tensor<T> r = detail::make_op<T>(
      {&a}, std::move(out),
      [y, axis](detail::BackwardCtx<T>& ctx) {
        Tensor<T> yy = ctx.prep(*y);
        Tensor<T> dot = reduce_sum(mul(ctx.upstream, yy), axis, true);
        ctx.accumulate(0, mul(sub(ctx.upstream, dot), yy));
      },
      [y, axis](detail::JvpCtx<T>& ctx) {
        Tensor<T> yd = y->detach();
        Tensor<T> dot = reduce_sum(mul(ctx.tan(0), yd), axis, true);
        return mul(sub(ctx.tan(0), dot), yd);
      });
  *y = r;
  return r;
}

// ---- matmul ----------------------------------------------------------------

namespace detail {
// C[b] = A[b] x B[b] over broadcast batch dims; ikj loop order.
template <class T>
void matmul_kernel(const T* pa, const T* pb, T* pc, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = pc + static_cast<int64_t>(i) * n;
    const T* arow = pa + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = pb + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2");
  const int m = a.dim(a.ndim() - 2), ka = a.dim(a.ndim() - 1);
  const int kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (ka != kb) shape_fail("matmul", a.shape(), b.shape());
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_shape("matmul", batch_a, batch_b);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const int64_t nbatch = numel(batch);
  auto sa = detail::broadcast_strides(batch_a, batch);
  auto sb = detail::broadcast_strides(batch_b, batch);
  const int64_t mat_a = static_cast<int64_t>(m) * ka;
  const int64_t mat_b = static_cast<int64_t>(kb) * n;
  const int64_t mat_c = static_cast<int64_t>(m) * n;
  const int r = static_cast<int>(batch.size());
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t bi = 0; bi < nbatch; ++bi) {
    detail::matmul_kernel(a.data() + oa * mat_a, b.data() + ob * mat_b,
                          out.data() + bi * mat_c, m, ka, n);
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      oa += sa[static_cast<size_t>(d)];
      ob += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < batch[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      oa -= sa[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
      ob -= sb[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
    }
  }
  Tensor<T> av = a, bv = b;
  Shape ash = a.shape(), bsh = b.shape();
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [av, bv, ash, bsh](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(
            0, reduce_to_shape(matmul(ctx.upstream, transpose(ctx.prep(bv))), ash));
        ctx.accumulate(
            1, reduce_to_shape(matmul(transpose(ctx.prep(av)), ctx.upstream), bsh));
      },
      [av, bv](detail::JvpCtx<T>& ctx) {
        return add(matmul(ctx.tan(0), bv.detach()),
                   matmul(av.detach(), ctx.tan(1)));
      });
}

// ---- shape ops ---------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(shape));
  Tensor<T> result = a.viewed_as(std::move(shape));
  Shape in_shape = a.shape();
  Shape out_shape = result.shape();
  return detail::make_op<T>(
      {&a}, std::move(result),
      [in_shape](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, reshape(ctx.upstream, in_shape));
      },
      [out_shape](detail::JvpCtx<T>& ctx) {
        return reshape(ctx.tan(0), out_shape);
      });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.ndim();
  if (static_cast<int>(perm.size()) != r)
    throw std::invalid_argument("permute: axis list rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int p = perm[static_cast<size_t>(i)];
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
      throw std::invalid_argument("permute: invalid axis list");
    seen[static_cast<size_t>(p)] = true;
    out_shape[static_cast<size_t>(i)] = a.dim(p);
  }
  Tensor<T> out(out_shape);
  std::vector<int64_t> in_strides(static_cast<size_t>(r));
  {
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      in_strides[static_cast<size_t>(i)] = acc;
      acc *= a.dim(i);
    }
  }
  std::vector<int64_t> walk(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    walk[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = a.size();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pa[off];
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      off += walk[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      off -= walk[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
  std::vector<int> inv(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
  std::vector<int> perm_copy = perm;
  return detail::make_op<T>(
      {&a}, std::move(out),
      [inv](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, permute(ctx.upstream, inv));
      },
      [perm_copy](detail::JvpCtx<T>& ctx) {
        return permute(ctx.tan(0), perm_copy);
      });
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  std::vector<int> perm(static_cast<size_t>(a.ndim()));
  for (int i = 0; i < a.ndim(); ++i) perm[static_cast<size_t>(i)] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  axis = detail::norm_axis("slice", axis, a.ndim());
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") exceeds extent " +
                                std::to_string(a.dim(axis)));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<T> out(out_shape);
  int64_t outer, ext, inner;
  detail::axis_spans(a.shape(), axis, outer, ext, inner);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t e = 0; e < len; ++e)
      std::copy_n(pa + (o * ext + start + e) * inner, inner,
                  po + (o * static_cast<int64_t>(len) + e) * inner);
  Shape in_shape = a.shape();
  const int before = start, after = a.dim(axis) - start - len;
  return detail::make_op<T>(
      {&a}, std::move(out),
      [in_shape, axis, before, after](detail::BackwardCtx<T>& ctx) {
        Tensor<T> g = ctx.upstream;
        if (before > 0) {
          Shape zs = in_shape;
          zs[static_cast<size_t>(axis)] = before;
          g = concat(Tensor<T>::zeros(zs), g, axis);
        }
        if (after > 0) {
          Shape zs = in_shape;
          zs[static_cast<size_t>(axis)] = after;
          g = concat(g, Tensor<T>::zeros(zs), axis);
        }
        ctx.accumulate(0, g);
      },
      [axis, start, len](detail::JvpCtx<T>& ctx) {
        return slice(ctx.tan(0), axis, start, len);
      });
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.ndim() != b.ndim()) shape_fail("concat", a.shape(), b.shape());
  axis = detail::norm_axis("concat", axis, a.ndim());
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis && a.dim(i) != b.dim(i)) shape_fail("concat", a.shape(), b.shape());
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] += b.dim(axis);
  Tensor<T> out(out_shape);
  int64_t outer, ea, inner;
  detail::axis_spans(a.shape(), axis, outer, ea, inner);
  const int64_t eb = b.dim(axis);
  const int64_t eo = ea + eb;
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(pa + o * ea * inner, ea * inner, po + o * eo * inner);
    std::copy_n(pb + o * eb * inner, eb * inner, po + (o * eo + ea) * inner);
  }
  const int la = a.dim(axis), lb = b.dim(axis);
  return detail::make_op<T>(
      {&a, &b}, std::move(out),
      [axis, la, lb](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, slice(ctx.upstream, axis, 0, la));
        ctx.accumulate(1, slice(ctx.upstream, axis, la, lb));
      },
      [axis](detail::JvpCtx<T>& ctx) {
        return concat(ctx.tan(0), ctx.tan(1), axis);
      });
}

// ---- weighted gather ------------------------------------------------------

// A sparse linear map from one flattened index space to another: every output
// element is a fixed weighted sum of up to `taps` input elements (index -1
// reads as zero). Patch extraction, patch reassembly and bilinear resampling
// are all instances. Leading batch dimensions broadcast through unchanged.
template <class T>
struct GatherPlan {
  Shape in_shape;   // trailing dims consumed per batch element
  Shape out_shape;  // trailing dims produced per batch element
  int taps = 1;
  std::vector<int64_t> idx;  // [numel(out_shape) * taps]
  std::vector<T> wgt;        // same length
};

template <class T>
Tensor<T> gather_adjoint(const Tensor<T>& g,
                         std::shared_ptr<const GatherPlan<T>> plan);

template <class T>
Tensor<T> gather_apply(const Tensor<T>& x,
                       std::shared_ptr<const GatherPlan<T>> plan) {
  const int64_t in_inner = numel(plan->in_shape);
  const int64_t out_inner = numel(plan->out_shape);
  if (x.size() % in_inner != 0 ||
      static_cast<int>(x.ndim()) < static_cast<int>(plan->in_shape.size()))
    throw std::invalid_argument("gather: input " + shape_str(x.shape()) +
                                " does not end in " + shape_str(plan->in_shape));
  for (size_t i = 0; i < plan->in_shape.size(); ++i)
    if (x.dim(x.ndim() - static_cast<int>(plan->in_shape.size()) + static_cast<int>(i)) !=
        plan->in_shape[i])
      throw std::invalid_argument("gather: input " + shape_str(x.shape()) +
                                  " does not end in " + shape_str(plan->in_shape));
  const int64_t nbatch = x.size() / in_inner;
  Shape out_shape(x.shape().begin(),
                  x.shape().end() - static_cast<int>(plan->in_shape.size()));
  out_shape.insert(out_shape.end(), plan->out_shape.begin(), plan->out_shape.end());
  Tensor<T> out(out_shape);
  const T* px = x.data();
  T* po = out.data();
  const int taps = plan->taps;
  for (int64_t b = 0; b < nbatch; ++b) {
    const T* src = px + b * in_inner;
    T* dst = po + b * out_inner;
    for (int64_t i = 0; i < out_inner; ++i) {
      T acc = T(0);
      const int64_t base = i * taps;
      for (int t = 0; t < taps; ++t) {
        const int64_t j = plan->idx[static_cast<size_t>(base + t)];
        if (j >= 0) acc += plan->wgt[static_cast<size_t>(base + t)] * src[j];
      }
      dst[i] = acc;
    }
  }
  return detail::make_op<T>(
      {&x}, std::move(out),
      [plan](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, gather_adjoint(ctx.upstream, plan));
      },
      [plan](detail::JvpCtx<T>& ctx) { return gather_apply(ctx.tan(0), plan); });
}

// Transpose of gather_apply: scatter-adds gradients back to the input index
// space. Fixed iteration order keeps results bit-reproducible.
template <class T>
Tensor<T> gather_adjoint(const Tensor<T>& g,
                         std::shared_ptr<const GatherPlan<T>> plan) {
  const int64_t in_inner = numel(plan->in_shape);
  const int64_t out_inner = numel(plan->out_shape);
  if (g.size() % out_inner != 0)
    throw std::invalid_argument("gather_adjoint: bad gradient shape " +
                                shape_str(g.shape()));
  const int64_t nbatch = g.size() / out_inner;
  Shape in_shape(g.shape().begin(),
                 g.shape().end() - static_cast<int>(plan->out_shape.size()));
  in_shape.insert(in_shape.end(), plan->in_shape.begin(), plan->in_shape.end());
  Tensor<T> out(in_shape);
  const T* pg = g.data();
  T* po = out.data();
  const int taps = plan->taps;
  for (int64_t b = 0; b < nbatch; ++b) {
    const T* src = pg + b * out_inner;
    T* dst = po + b * in_inner;
    for (int64_t i = 0; i < out_inner; ++i) {
      const int64_t base = i * taps;
      for (int t = 0; t < taps; ++t) {
        const int64_t j = plan->idx[static_cast<size_t>(base + t)];
        if (j >= 0) dst[j] += plan->wgt[static_cast<size_t>(base + t)] * src[i];
      }
    }
  }
  return detail::make_op<T>(
      {&g}, std::move(out),
      [plan](detail::BackwardCtx<T>& ctx) {
        ctx.accumulate(0, gather_apply(ctx.upstream, plan));
      },
      [plan](detail::JvpCtx<T>& ctx) { return gather_adjoint(ctx.tan(0), plan); });
}

// ---- small conveniences ------------------------------------------------------

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return mul(a, a);
}

// Frobenius norm as a tracked scalar.
template <class T>
Tensor<T> frob_norm(const Tensor<T>& a) {
  return sqrt(sum_all(mul(a, a)));
}

template <class T>
T l2_norm_value(const Tensor<T>& a) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double v = static_cast<double>(a[i]);
    acc += v * v;
  }
  return static_cast<T>(std::sqrt(acc));
}

}  // namespace vitgan
