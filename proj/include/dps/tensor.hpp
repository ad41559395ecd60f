#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dps/rng.hpp"

namespace dps {

#ifdef DPS_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::int64_t>;

/// Scoped flush-to-zero / denormals-are-zero mode for the calling thread.
/// Saturated activations otherwise produce subnormal intermediates whose
/// microcoded handling dominates training time. Applied identically on every
/// code path that touches network values, so results do not depend on the
/// worker count. No-op on non-x86 targets.
class DenormalFlushGuard {
 public:
#if defined(__SSE2__) || defined(_M_X64)
  DenormalFlushGuard() : saved_(__builtin_ia32_stmxcsr()) {
    __builtin_ia32_ldmxcsr(saved_ | 0x8040);  // FTZ | DAZ
  }
  ~DenormalFlushGuard() { __builtin_ia32_ldmxcsr(saved_); }

 private:
  unsigned int saved_;
#else
  DenormalFlushGuard() = default;
#endif
  DenormalFlushGuard(const DenormalFlushGuard&) = delete;
  DenormalFlushGuard& operator=(const DenormalFlushGuard&) = delete;
};

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& msg) { throw std::invalid_argument(msg); }

class Tape;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<real>> value;
  std::vector<real> grad;  // non-empty iff this tensor is differentiable on a tape
  Tape* tape = nullptr;
  std::int64_t node = -1;  // index of the producing tape record, -1 for leaves
};

/// Dense n-d array of scalars. A tensor is a cheap handle (shared impl);
/// constants carry no gradient storage. Tensors become differentiable either
/// by Tape::watch (leaves) or by being produced by an op whose inputs are on
/// a tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s) { return alloc(std::move(s), 0.0); }
  static Tensor full(Shape s, real v) { return alloc(std::move(s), v); }
  static Tensor ones(Shape s) { return alloc(std::move(s), 1.0); }
  static Tensor scalar(real v) { return from({1}, {v}); }

  static Tensor from(Shape s, std::vector<real> data) {
    if (shape_numel(s) != static_cast<std::int64_t>(data.size()))
      shape_error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                  shape_str(s));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(s);
    impl->value = std::make_shared<std::vector<real>>(std::move(data));
    return Tensor(std::move(impl));
  }

  static Tensor uniform(Shape s, CounterRng& rng, real lo, real hi) {
    auto t = zeros(std::move(s));
    for (auto& v : t.values()) v = static_cast<real>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return shape_numel(impl_->shape); }
  std::int64_t size(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }

  const real* data() const { return impl_->value->data(); }
  const std::vector<real>& values() const { return *impl_->value; }
  std::vector<real>& values() { return *impl_->value; }

  real item() const {
    if (numel() != 1) shape_error("item() requires a single-element tensor, got " + shape_str(shape()));
    return (*impl_->value)[0];
  }

  bool on_tape() const { return impl_->tape != nullptr; }
  bool grad_enabled() const { return !impl_->grad.empty(); }
  const std::vector<real>& grad() const {
    if (impl_->grad.empty()) shape_error("tensor has no gradient (constant or not on a tape)");
    return impl_->grad;
  }

  /// New leaf sharing this tensor's value storage; used to expose shared
  /// read-only parameters to per-sample tapes.
  Tensor shared_value_leaf() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->value = impl_->value;
    return Tensor(std::move(impl));
  }

  Tensor clone_detached() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->value = std::make_shared<std::vector<real>>(*impl_->value);
    return Tensor(std::move(impl));
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor alloc(Shape s, real fill) {
    auto impl = std::make_shared<TensorImpl>();
    const auto n = shape_numel(s);
    impl->shape = std::move(s);
    impl->value = std::make_shared<std::vector<real>>(static_cast<std::size_t>(n), fill);
    return Tensor(std::move(impl));
  }

  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode tape. Records are appended in forward order, so inputs always
/// precede the ops consuming them; backward() replays them once, in reverse.
/// A tape and the tensors attached to it are confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& w : attached_)
      if (auto impl = w.lock()) {
        impl->tape = nullptr;
        impl->node = -1;
      }
  }

  /// Mark a leaf (typically a parameter) as differentiable on this tape.
  void watch(Tensor& t) {
    auto& impl = *t.impl();
    if (impl.tape == this) return;
    if (impl.tape != nullptr) shape_error("tensor is already attached to another tape");
    impl.tape = this;
    impl.node = -1;
    impl.grad.assign(static_cast<std::size_t>(t.numel()), 0);
    attached_.push_back(t.impl());
  }

  void attach_output(const std::shared_ptr<TensorImpl>& impl) {
    impl->tape = this;
    impl->grad.assign(impl->value->size(), 0);
    attached_.push_back(impl);
  }

  std::int64_t record(std::function<void()> fn) {
    records_.push_back(std::move(fn));
    return static_cast<std::int64_t>(records_.size()) - 1;
  }

  /// Seed d(loss)/d(loss)=1 and propagate to every reachable tensor.
  /// Parameters not reachable from the loss keep their zero gradient.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.impl()->tape != this)
      shape_error("backward: loss is not attached to this tape");
    if (loss.numel() != 1)
      shape_error("backward: loss must be a single element, got " + shape_str(loss.shape()));
    if (ran_backward_) shape_error("backward: tape already traversed");
    ran_backward_ = true;
    loss.impl()->grad[0] = 1;
    const std::int64_t start = loss.impl()->node;
    for (std::int64_t i = start; i >= 0; --i) records_[static_cast<std::size_t>(i)]();
  }

  std::size_t num_records() const { return records_.size(); }

 private:
  std::vector<std::function<void()>> records_;
  std::vector<std::weak_ptr<TensorImpl>> attached_;
  bool ran_backward_ = false;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.on_tape()) shape_error("backward: loss has no tape");
  loss.impl()->tape->backward(loss);
}

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->defined()) continue;
    Tape* tt = t->impl()->tape;
    if (!tt) continue;
    if (tape && tape != tt) shape_error("op inputs belong to different tapes");
    tape = tt;
  }
  return tape;
}

inline void record_op(Tape* tape, const Tensor& out, std::function<void()> fn) {
  if (!tape) return;
  tape->attach_output(out.impl());
  out.impl()->node = tape->record(std::move(fn));
}

// Row-major strides, with 0 on axes broadcast against the output shape.
struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

inline BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b, const char* opname) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size())
    shape_error(std::string(opname) + ": rank mismatch between " + shape_str(as) + " and " +
                shape_str(bs));
  const int r = static_cast<int>(as.size());
  BroadcastPlan p;
  p.out.resize(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) {
    const auto ad = as[static_cast<std::size_t>(d)], bd = bs[static_cast<std::size_t>(d)];
    if (ad != bd && ad != 1 && bd != 1)
      shape_error(std::string(opname) + ": shapes " + shape_str(as) + " and " + shape_str(bs) +
                  " are not broadcast-compatible");
    p.out[static_cast<std::size_t>(d)] = std::max(ad, bd);
  }
  p.sa.assign(static_cast<std::size_t>(r), 0);
  p.sb.assign(static_cast<std::size_t>(r), 0);
  std::int64_t stra = 1, strb = 1;
  for (int d = r - 1; d >= 0; --d) {
    const auto ad = as[static_cast<std::size_t>(d)], bd = bs[static_cast<std::size_t>(d)];
    p.sa[static_cast<std::size_t>(d)] = (ad == 1 && p.out[static_cast<std::size_t>(d)] != 1) ? 0 : stra;
    p.sb[static_cast<std::size_t>(d)] = (bd == 1 && p.out[static_cast<std::size_t>(d)] != 1) ? 0 : strb;
    stra *= ad;
    strb *= bd;
  }
  return p;
}

// Visit every output offset along with the two (possibly broadcast) input
// offsets, in row-major order.
template <typename Fn>
inline void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const int r = static_cast<int>(p.out.size());
  const std::int64_t n = shape_numel(p.out);
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      ia += p.sa[ud];
      ib += p.sb[ud];
      if (idx[ud] < p.out[ud]) break;
      idx[ud] = 0;
      ia -= p.sa[ud] * p.out[ud];
      ib -= p.sb[ud] * p.out[ud];
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const auto plan = broadcast_plan(a, b, name);
  Tensor out = Tensor::zeros(plan.out);
  const real* av = a.data();
  const real* bv = b.data();
  real* ov = out.values().data();
  const bool same = a.shape() == b.shape();
  const std::int64_t n = out.numel();
  if (same) {
    switch (op) {
      case BinOp::Add: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
      case BinOp::Sub: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
      case BinOp::Mul: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
      case BinOp::Div: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i]; break;
    }
  } else {
    for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      switch (op) {
        case BinOp::Add: ov[o] = av[ia] + bv[ib]; break;
        case BinOp::Sub: ov[o] = av[ia] - bv[ib]; break;
        case BinOp::Mul: ov[o] = av[ia] * bv[ib]; break;
        case BinOp::Div: ov[o] = av[ia] / bv[ib]; break;
      }
    });
  }
  Tape* tape = common_tape({&a, &b});
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record_op(tape, out, [ai, bi, oi, plan, op, same, n] {
      const real* go = oi->grad.data();
      const real* avd = ai->value->data();
      const real* bvd = bi->value->data();
      real* ga = ai->grad.empty() ? nullptr : ai->grad.data();
      real* gb = bi->grad.empty() ? nullptr : bi->grad.data();
      if (same) {
        for (std::int64_t i = 0; i < n; ++i) {
          const real g = go[i];
          switch (op) {
            case BinOp::Add:
              if (ga) ga[i] += g;
              if (gb) gb[i] += g;
              break;
            case BinOp::Sub:
              if (ga) ga[i] += g;
              if (gb) gb[i] -= g;
              break;
            case BinOp::Mul:
              if (ga) ga[i] += g * bvd[i];
              if (gb) gb[i] += g * avd[i];
              break;
            case BinOp::Div:
              if (ga) ga[i] += g / bvd[i];
              if (gb) gb[i] -= g * avd[i] / (bvd[i] * bvd[i]);
              break;
          }
        }
      } else {
        for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          const real g = go[o];
          switch (op) {
            case BinOp::Add:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] += g;
              break;
            case BinOp::Sub:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] -= g;
              break;
            case BinOp::Mul:
              if (ga) ga[ia] += g * bvd[ib];
              if (gb) gb[ib] += g * avd[ia];
              break;
            case BinOp::Div:
              if (ga) ga[ia] += g / bvd[ib];
              if (gb) gb[ib] -= g * avd[ia] / (bvd[ib] * bvd[ib]);
              break;
          }
        });
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Div, "div"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// out = k*x + c, elementwise.
inline Tensor affine(const Tensor& x, real k, real c) {
  Tensor out = Tensor::zeros(x.shape());
  const real* xv = x.data();
  real* ov = out.values().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = k * xv[i] + c;
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, k, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += k * go[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, real k) { return affine(x, k, 0); }
inline Tensor operator*(const Tensor& x, real k) { return scale(x, k); }
inline Tensor operator*(real k, const Tensor& x) { return scale(x, k); }

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, real lo, real hi) {
  Tensor out = Tensor::zeros(x.shape());
  const real* xv = x.data();
  real* ov = out.values().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = std::min(std::max(xv[i], lo), hi);
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, lo, hi, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      const real* xv2 = xi->value->data();
      real* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i)
        if (xv2[i] > lo && xv2[i] < hi) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const real* xv = x.data();
  real* ov = out.values().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = std::log(xv[i]);
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      const real* xv2 = xi->value->data();
      real* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] / xv2[i];
    });
  }
  return out;
}

enum class Act { Sigmoid, Tanh, Gelu, Relu };

inline Tensor activation(Act kind, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const real* xv = x.data();
  real* ov = out.values().data();
  const std::int64_t n = x.numel();
  constexpr real kInvSqrt2 = static_cast<real>(0.70710678118654752440);
  constexpr real kInvSqrt2Pi = static_cast<real>(0.39894228040143267794);
  for (std::int64_t i = 0; i < n; ++i) {
    const real v = xv[i];
    switch (kind) {
      case Act::Sigmoid: {
        // keep the range open under saturation, as for tanh below
        const real y = v >= 0 ? 1 / (1 + std::exp(-v)) : std::exp(v) / (1 + std::exp(v));
        ov[i] = std::min(std::max(y, std::numeric_limits<real>::min()),
                         std::nextafter(static_cast<real>(1), static_cast<real>(0)));
        break;
      }
      case Act::Tanh: {
        // keep the range open even where std::tanh rounds to +/-1, so
        // tanh-bounded quantities (offset fields) stay strictly inside
        const real cap = std::nextafter(static_cast<real>(1), static_cast<real>(0));
        ov[i] = std::min(std::max(std::tanh(v), -cap), cap);
        break;
      }
      case Act::Gelu: ov[i] = static_cast<real>(0.5) * v * (1 + std::erf(v * kInvSqrt2)); break;
      case Act::Relu: ov[i] = v > 0 ? v : 0; break;
    }
  }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, kind, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      const real* xv2 = xi->value->data();
      const real* yv = oi->value->data();
      real* gx = xi->grad.data();
      constexpr real kInvSqrt2b = static_cast<real>(0.70710678118654752440);
      constexpr real kInvSqrt2Pib = static_cast<real>(0.39894228040143267794);
      for (std::int64_t i = 0; i < n; ++i) {
        real d = 0;
        switch (kind) {
          case Act::Sigmoid: d = yv[i] * (1 - yv[i]); break;
          case Act::Tanh: d = 1 - yv[i] * yv[i]; break;
          case Act::Gelu: {
            const real v = xv2[i];
            const real cdf = static_cast<real>(0.5) * (1 + std::erf(v * kInvSqrt2b));
            const real pdf = kInvSqrt2Pib * std::exp(static_cast<real>(-0.5) * v * v);
            d = cdf + v * pdf;
            break;
          }
          case Act::Relu: d = xv2[i] > 0 ? 1 : 0; break;
        }
        gx[i] += d * go[i];
      }
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) { return activation(Act::Sigmoid, x); }
inline Tensor tanh_act(const Tensor& x) { return activation(Act::Tanh, x); }
inline Tensor gelu(const Tensor& x) { return activation(Act::Gelu, x); }
inline Tensor relu(const Tensor& x) { return activation(Act::Relu, x); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    shape_error("matmul: expected two matrices, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  const std::int64_t m = a.size(0), k = a.size(1), k2 = b.size(0), n = b.size(1);
  if (k != k2)
    shape_error("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  const real* av = a.data();
  const real* bv = b.data();
  real* ov = out.values().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      const real aval = av[i * k + p];
      if (aval == 0) continue;
      const real* brow = bv + p * n;
      real* orow = ov + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
    }
  Tape* tape = detail::common_tape({&a, &b});
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    detail::record_op(tape, out, [ai, bi, oi, m, k, n] {
      const real* go = oi->grad.data();
      const real* avd = ai->value->data();
      const real* bvd = bi->value->data();
      if (!ai->grad.empty()) {
        real* ga = ai->grad.data();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            real acc = 0;
            const real* grow = go + i * n;
            const real* brow = bvd + p * n;
            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
      }
      if (!bi->grad.empty()) {
        real* gb = bi->grad.data();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            const real aval = avd[i * k + p];
            if (aval == 0) continue;
            const real* grow = go + i * n;
            real* gbrow = gb + p * n;
            for (std::int64_t j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
          }
      }
    });
  }
  return out;
}

inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    shape_error("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  const std::int64_t lane = s[static_cast<std::size_t>(axis)];
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < x.rank(); ++d) inner *= s[static_cast<std::size_t>(d)];
  Tensor out = Tensor::zeros(s);
  const real* xv = x.data();
  real* ov = out.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * lane * inner + in;
      real mx = xv[base];
      for (std::int64_t l = 1; l < lane; ++l) mx = std::max(mx, xv[base + l * inner]);
      real sum = 0;
      for (std::int64_t l = 0; l < lane; ++l) {
        const real e = std::exp(xv[base + l * inner] - mx);
        ov[base + l * inner] = e;
        sum += e;
      }
      const real inv = 1 / sum;
      for (std::int64_t l = 0; l < lane; ++l) ov[base + l * inner] *= inv;
    }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, outer, inner, lane] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      const real* yv = oi->value->data();
      real* gx = xi->grad.data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * lane * inner + in;
          real dot = 0;
          for (std::int64_t l = 0; l < lane; ++l)
            dot += go[base + l * inner] * yv[base + l * inner];
          for (std::int64_t l = 0; l < lane; ++l) {
            const std::int64_t k = base + l * inner;
            gx[k] += yv[k] * (go[k] - dot);
          }
        }
    });
  }
  return out;
}

enum class Reduce { Sum, Mean, Max };

inline Tensor reduce(Reduce kind, const Tensor& x, std::vector<int> axes, bool keepdims = false) {
  const int r = x.rank();
  std::vector<bool> red(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r)
      shape_error("reduce: axis " + std::to_string(a) + " invalid for " + shape_str(x.shape()));
    red[static_cast<std::size_t>(a)] = true;
  }
  Shape oshape;
  std::int64_t reduced_count = 1;
  for (int d = 0; d < r; ++d) {
    if (red[static_cast<std::size_t>(d)]) {
      reduced_count *= x.size(d);
      if (keepdims) oshape.push_back(1);
    } else {
      oshape.push_back(x.size(d));
    }
  }
  if (oshape.empty()) oshape.push_back(1);

  // Output strides aligned to input axes (0 on reduced axes).
  std::vector<std::int64_t> ostride(static_cast<std::size_t>(r), 0);
  {
    std::int64_t st = 1;
    for (int d = r - 1; d >= 0; --d) {
      if (!red[static_cast<std::size_t>(d)]) {
        ostride[static_cast<std::size_t>(d)] = st;
        st *= x.size(d);
      }
    }
  }
  const std::int64_t n = x.numel();
  const std::int64_t on = shape_numel(oshape);
  Tensor out = kind == Reduce::Max ? Tensor::full(oshape, std::numeric_limits<real>::lowest())
                                   : Tensor::zeros(oshape);
  const real* xv = x.data();
  real* ov = out.values().data();
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (kind == Reduce::Max) argmax->assign(static_cast<std::size_t>(on), -1);

  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t oi_off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (kind == Reduce::Max) {
      if (xv[i] > ov[oi_off]) {
        ov[oi_off] = xv[i];
        (*argmax)[static_cast<std::size_t>(oi_off)] = i;
      }
    } else {
      ov[oi_off] += xv[i];
    }
    for (int d = r - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      oi_off += ostride[ud];
      if (idx[ud] < x.size(d)) break;
      idx[ud] = 0;
      oi_off -= ostride[ud] * x.size(d);
    }
  }
  if (kind == Reduce::Mean) {
    const real inv = static_cast<real>(1.0 / static_cast<double>(reduced_count));
    for (std::int64_t i = 0; i < on; ++i) ov[i] *= inv;
  }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi2 = out.impl();
    const Shape xshape = x.shape();
    detail::record_op(tape, out, [xi, oi2, kind, ostride, xshape, reduced_count, argmax, on, n, r] {
      if (xi->grad.empty()) return;
      const real* go = oi2->grad.data();
      real* gx = xi->grad.data();
      if (kind == Reduce::Max) {
        for (std::int64_t o = 0; o < on; ++o) {
          const std::int64_t src = (*argmax)[static_cast<std::size_t>(o)];
          if (src >= 0) gx[src] += go[o];
        }
        return;
      }
      const real f = kind == Reduce::Mean
                         ? static_cast<real>(1.0 / static_cast<double>(reduced_count))
                         : static_cast<real>(1);
      std::vector<std::int64_t> idx2(static_cast<std::size_t>(r), 0);
      std::int64_t ooff = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += f * go[ooff];
        for (int d = r - 1; d >= 0; --d) {
          const auto ud = static_cast<std::size_t>(d);
          ++idx2[ud];
          ooff += ostride[ud];
          if (idx2[ud] < xshape[ud]) break;
          idx2[ud] = 0;
          ooff -= ostride[ud] * xshape[ud];
        }
      }
    });
  }
  return out;
}

inline Tensor reduce_sum(const Tensor& x, std::vector<int> axes, bool keepdims = false) {
  return reduce(Reduce::Sum, x, std::move(axes), keepdims);
}
inline Tensor reduce_mean(const Tensor& x, std::vector<int> axes, bool keepdims = false) {
  return reduce(Reduce::Mean, x, std::move(axes), keepdims);
}
inline Tensor reduce_max(const Tensor& x, std::vector<int> axes, bool keepdims = false) {
  return reduce(Reduce::Max, x, std::move(axes), keepdims);
}

inline Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  for (int d = 0; d < x.rank(); ++d) axes[static_cast<std::size_t>(d)] = d;
  return reduce_sum(x, axes);
}
inline Tensor mean_all(const Tensor& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  for (int d = 0; d < x.rank(); ++d) axes[static_cast<std::size_t>(d)] = d;
  return reduce_mean(x, axes);
}

inline Tensor reshape(const Tensor& x, Shape newshape) {
  if (shape_numel(newshape) != x.numel())
    shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(newshape));
  Tensor out = Tensor::from(std::move(newshape), x.values());
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    const std::int64_t n = x.numel();
    detail::record_op(tape, out, [xi, oi, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, std::vector<int> perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    shape_error("permute: order length " + std::to_string(perm.size()) + " does not match rank of " +
                shape_str(x.shape()));
  Shape oshape(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) oshape[static_cast<std::size_t>(d)] = x.size(perm[static_cast<std::size_t>(d)]);
  // input stride for each output axis
  std::vector<std::int64_t> xstride(static_cast<std::size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d)
    xstride[static_cast<std::size_t>(d)] = xstride[static_cast<std::size_t>(d + 1)] * x.size(d + 1);
  std::vector<std::int64_t> stride(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d)
    stride[static_cast<std::size_t>(d)] = xstride[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
  const std::int64_t n = x.numel();
  Tensor out = Tensor::zeros(oshape);
  const real* xv = x.data();
  real* ov = out.values().data();
  auto mapping = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t xoff = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    ov[o] = xv[xoff];
    (*mapping)[static_cast<std::size_t>(o)] = xoff;
    for (int d = r - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      xoff += stride[ud];
      if (idx[ud] < oshape[ud]) break;
      idx[ud] = 0;
      xoff -= stride[ud] * oshape[ud];
    }
  }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, mapping, n] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t o = 0; o < n; ++o) gx[(*mapping)[static_cast<std::size_t>(o)]] += go[o];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) { return permute(x, {1, 0}); }

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) shape_error("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) shape_error("concat: axis invalid");
  Shape oshape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (static_cast<int>(s.size()) != r)
      shape_error("concat: rank mismatch between " + shape_str(oshape) + " and " + shape_str(s));
    for (int d = 0; d < r; ++d)
      if (d != axis && s[static_cast<std::size_t>(d)] != oshape[static_cast<std::size_t>(d)])
        shape_error("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(s) +
                    " differ off-axis");
    oshape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= oshape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= oshape[static_cast<std::size_t>(d)];
  Tensor out = Tensor::zeros(oshape);
  real* ov = out.values().data();
  const std::int64_t ocols = oshape[static_cast<std::size_t>(axis)] * inner;
  std::int64_t col0 = 0;
  for (const Tensor& part : parts) {
    const std::int64_t pcols = part.size(axis) * inner;
    const real* pv = part.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(pv + o * pcols, pv + (o + 1) * pcols, ov + o * ocols + col0);
    col0 += pcols;
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    Tape* t = detail::common_tape({&p});
    if (t) {
      if (tape && tape != t) shape_error("concat: inputs from different tapes");
      tape = t;
    }
  }
  if (tape) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<std::int64_t> cols;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      cols.push_back(p.size(axis) * inner);
    }
    auto oi = out.impl();
    detail::record_op(tape, out, [impls, cols, oi, outer, ocols] {
      const real* go = oi->grad.data();
      std::int64_t c0 = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (!impls[p]->grad.empty()) {
          real* gp = impls[p]->grad.data();
          for (std::int64_t o = 0; o < outer; ++o) {
            const real* src = go + o * ocols + c0;
            real* dst = gp + o * cols[p];
            for (std::int64_t j = 0; j < cols[p]; ++j) dst[j] += src[j];
          }
        }
        c0 += cols[p];
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) shape_error("slice: axis invalid");
  if (start < 0 || len < 1 || start + len > x.size(axis))
    shape_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for " + shape_str(x.shape()));
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.size(d);
  for (int d = axis + 1; d < r; ++d) inner *= x.size(d);
  const std::int64_t xcols = x.size(axis) * inner;
  const std::int64_t ocols = len * inner;
  Tensor out = Tensor::zeros(oshape);
  const real* xv = x.data();
  real* ov = out.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(xv + o * xcols + start * inner, xv + o * xcols + (start + len) * inner, ov + o * ocols);
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, outer, xcols, ocols, start, inner] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        const real* src = go + o * ocols;
        real* dst = gx + o * xcols + start * inner;
        for (std::int64_t j = 0; j < ocols; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

}  // namespace dps
